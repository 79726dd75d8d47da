//! Fully-convolutional sparse box detector: multi-scale encoder–decoder
//! backbone, per-voxel classification and box regression heads, center-inside
//! target assignment, focal and IoU losses, and NMS decoding.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, box_iou_grad, Box3D};
use crate::nn::{he_normal, normal, Graph, ParamId, ParamStore, Var};
use crate::scene::GtBox;
use crate::sparse::{Key, KernelMap, Layout, Pyramid};
use crate::tensor::Tensor;
use crate::voxel::{Coord, HasBox, SparseGrid};

/// Log-size deltas are clamped to this magnitude before exponentiation.
pub const LOG_SIZE_CLAMP: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_proposals: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            score_threshold: 0.02,
            nms_iou: 0.35,
            max_proposals: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub voxel_size: f64,
    pub in_channels: usize,
    /// Channel width per backbone level; level `l` has stride `2^l`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub head_levels: Vec<usize>,
    pub k_max: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub nms: NmsConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            voxel_size: 0.05,
            in_channels: 4,
            widths: vec![32, 64, 128, 256],
            num_classes: 3,
            head_levels: vec![1, 2, 3],
            k_max: 18,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            nms: NmsConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid backbone widths {:?}", self.widths)));
        }
        if self.head_levels.is_empty() || self.head_levels.iter().any(|&l| l >= self.widths.len()) {
            return Err(Error::Config(format!(
                "head levels {:?} must index backbone levels 0..{}",
                self.head_levels,
                self.widths.len()
            )));
        }
        if self.num_classes == 0 || self.k_max == 0 {
            return Err(Error::Config("num_classes and k_max must be positive".into()));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        let n = &self.nms;
        if !(0.0..=1.0).contains(&n.score_threshold) || !(0.0..=1.0).contains(&n.nms_iou) || n.max_proposals == 0 {
            return Err(Error::Config(format!("invalid NMS settings {n:?}")));
        }
        Ok(())
    }

    pub fn stride(&self, level: usize) -> usize {
        1 << level
    }

    /// Reference box edge for log-size regression at a level.
    pub fn reference_size(&self, level: usize) -> f64 {
        4.0 * self.stride(level) as f64 * self.voxel_size
    }
}

/// A scored, classified box proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: Box3D,
    pub class_id: usize,
    pub score: f64,
}

impl HasBox for Proposal {
    fn bbox(&self) -> &Box3D {
        &self.bbox
    }
}

/// Backbone feature grids, finest first (stride 1, 2, 4, …).
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub levels: Vec<LevelFeatures>,
}

#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub stride: usize,
    pub coords: Vec<Coord>,
    pub features: Tensor,
}

/// Per-voxel head outputs at one level.
#[derive(Debug, Clone)]
pub struct HeadLevelOutput {
    pub level: usize,
    pub coords: Vec<Coord>,
    pub cls_logits: Tensor,
    pub box_deltas: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub levels: Vec<HeadLevelOutput>,
}

/// In-graph backbone result over a batched layout.
pub struct BackboneVars {
    pub pyramid: Pyramid,
    pub levels: Vec<Var>,
}

pub struct HeadVars {
    pub levels: Vec<(usize, Var, Var)>,
}

#[derive(Debug, Clone)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    stem: ConvParams,
    enc: Vec<ConvParams>,
    down: Vec<ConvParams>,
    up: Vec<ConvParams>,
    dec: Vec<ConvParams>,
    cls: Vec<ConvParams>,
    reg: Vec<ConvParams>,
}

/// Effective number of active kernel taps used for He fan-in.
const SUBM_FAN: usize = 14;
const DOWN_FAN: usize = 4;

fn conv_params(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    taps: usize,
    fan: usize,
    cin: usize,
    cout: usize,
) -> ConvParams {
    ConvParams {
        w: store.add(format!("{name}.w"), he_normal(rng, taps * cin, cout, fan * cin)),
        b: store.add(format!("{name}.b"), Tensor::zeros(1, cout)),
    }
}

impl Detector {
    /// Registers freshly initialized parameters under `detector.*`.
    pub fn new(cfg: DetectorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let levels = w.len();
        let stem = conv_params(store, rng, "detector.stem", 27, SUBM_FAN, cfg.in_channels, w[0]);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels {
            if l > 0 {
                down.push(conv_params(store, rng, &format!("detector.down{l}"), 8, DOWN_FAN, w[l - 1], w[l]));
            }
            enc.push(conv_params(store, rng, &format!("detector.enc{l}"), 27, SUBM_FAN, w[l], w[l]));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..levels.saturating_sub(1) {
            up.push(conv_params(store, rng, &format!("detector.up{l}"), 8, 1, w[l + 1], w[l]));
            dec.push(conv_params(store, rng, &format!("detector.dec{l}"), 27, SUBM_FAN, w[l], w[l]));
        }
        // Classification bias starts at a 1% foreground prior.
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        for &l in &cfg.head_levels {
            let cw = store.add(format!("detector.cls{l}.w"), normal(rng, w[l], cfg.num_classes, 0.01));
            let cb = store.add(
                format!("detector.cls{l}.b"),
                Tensor::from_vec(1, cfg.num_classes, vec![prior; cfg.num_classes]),
            );
            cls.push(ConvParams { w: cw, b: cb });
            let rw = store.add(format!("detector.reg{l}.w"), normal(rng, w[l], 6, 0.01));
            let rb = store.add(format!("detector.reg{l}.b"), Tensor::zeros(1, 6));
            reg.push(ConvParams { w: rw, b: rb });
        }
        Ok(Detector {
            cfg,
            stem,
            enc,
            down,
            up,
            dec,
            cls,
            reg,
        })
    }

    fn conv_relu(g: &mut Graph, x: Var, p: &ConvParams, map: &Rc<KernelMap>) -> Var {
        let h = g.conv(x, p.w, map.clone());
        let h = g.bias(h, p.b);
        g.relu(h)
    }

    /// Backbone over a batched stride-1 layout with its input features.
    pub fn backbone_graph(&self, g: &mut Graph, layout: Layout, features: Tensor) -> BackboneVars {
        let levels = self.cfg.widths.len();
        let pyramid = Pyramid::build(layout, levels);
        let subm: Vec<Rc<KernelMap>> = pyramid.subm.iter().cloned().map(Rc::new).collect();
        let down: Vec<Rc<KernelMap>> = pyramid.down.iter().cloned().map(Rc::new).collect();
        let up: Vec<Rc<KernelMap>> = pyramid.down.iter().map(|m| Rc::new(m.transpose())).collect();

        let x = g.constant(features);
        let mut h = Self::conv_relu(g, x, &self.stem, &subm[0]);
        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                h = Self::conv_relu(g, h, &self.down[l - 1], &down[l - 1]);
            }
            h = Self::conv_relu(g, h, &self.enc[l], &subm[l]);
            enc.push(h);
        }
        let mut dec = vec![enc[levels - 1]; levels];
        for l in (0..levels - 1).rev() {
            let u = Self::conv_relu(g, dec[l + 1], &self.up[l], &up[l]);
            let s = g.add(u, enc[l]);
            dec[l] = Self::conv_relu(g, s, &self.dec[l], &subm[l]);
        }
        BackboneVars { pyramid, levels: dec }
    }

    pub fn heads_graph(&self, g: &mut Graph, bb: &BackboneVars) -> HeadVars {
        let levels = self
            .cfg
            .head_levels
            .iter()
            .enumerate()
            .map(|(h, &l)| {
                let c = g.matmul(bb.levels[l], self.cls[h].w);
                let c = g.bias(c, self.cls[h].b);
                let r = g.matmul(bb.levels[l], self.reg[h].w);
                let r = g.bias(r, self.reg[h].b);
                (l, c, r)
            })
            .collect();
        HeadVars { levels }
    }

    /// Backbone features of a single grid, as plain values.
    pub fn backbone_forward(&self, params: &ParamStore, grid: &SparseGrid) -> Result<BackboneOutput> {
        if grid.is_empty() {
            return Err(Error::InvalidInput("backbone input grid is empty".into()));
        }
        let mut g = Graph::new(params);
        let bb = self.backbone_graph(&mut g, single_layout(&grid.coords), grid.features.clone());
        let levels = bb
            .levels
            .iter()
            .enumerate()
            .map(|(l, &v)| LevelFeatures {
                stride: self.cfg.stride(l),
                coords: strip_batch(&bb.pyramid.layouts[l].keys),
                features: g.value(v).clone(),
            })
            .collect();
        Ok(BackboneOutput { levels })
    }

    /// Head outputs computed from backbone feature values.
    pub fn head_forward(&self, params: &ParamStore, bb: &BackboneOutput) -> HeadOutput {
        let mut g = Graph::new(params);
        let levels = self
            .cfg
            .head_levels
            .iter()
            .enumerate()
            .map(|(h, &l)| {
                let x = g.constant(bb.levels[l].features.clone());
                let c = g.matmul(x, self.cls[h].w);
                let c = g.bias(c, self.cls[h].b);
                let r = g.matmul(x, self.reg[h].w);
                let r = g.bias(r, self.reg[h].b);
                HeadLevelOutput {
                    level: l,
                    coords: bb.levels[l].coords.clone(),
                    cls_logits: g.value(c).clone(),
                    box_deltas: g.value(r).clone(),
                }
            })
            .collect();
        HeadOutput { levels }
    }

    /// Extracts the head values of batch entry `b` from an evaluated graph.
    pub fn head_values(&self, g: &Graph, bb: &BackboneVars, heads: &HeadVars, b: i32) -> HeadOutput {
        let levels = heads
            .levels
            .iter()
            .map(|&(l, c, r)| {
                let layout = &bb.pyramid.layouts[l];
                let range = layout.batch_range(b);
                let idx: Vec<u32> = range.clone().map(|i| i as u32).collect();
                HeadLevelOutput {
                    level: l,
                    coords: strip_batch(&layout.keys[range]),
                    cls_logits: g.value(c).gather_rows(&idx),
                    box_deltas: g.value(r).gather_rows(&idx),
                }
            })
            .collect();
        HeadOutput { levels }
    }

    pub fn decode_box(&self, level: usize, coord: Coord, deltas: &[f64]) -> Box3D {
        decode_box(coord, self.cfg.stride(level), self.cfg.voxel_size, deltas)
    }
}

pub fn single_layout(coords: &[Coord]) -> Layout {
    Layout::from_sorted(coords.iter().map(|c| [0, c[0], c[1], c[2]]).collect())
}

pub fn strip_batch(keys: &[Key]) -> Vec<Coord> {
    keys.iter().map(|k| [k[1], k[2], k[3]]).collect()
}

/// Center of a voxel at the given stride, in meters.
pub fn level_center(coord: Coord, stride: usize, voxel_size: f64) -> [f64; 3] {
    let unit = stride as f64 * voxel_size;
    coord.map(|c| (c as f64 + 0.5) * unit)
}

/// `center = voxel center + d[0..3]·unit`, `size = s_ref · exp(d[3..6])`
/// with `unit = stride · voxel_size` and `s_ref = 4 · unit`.
pub fn decode_box(coord: Coord, stride: usize, voxel_size: f64, d: &[f64]) -> Box3D {
    let unit = stride as f64 * voxel_size;
    let s_ref = 4.0 * unit;
    let c = level_center(coord, stride, voxel_size);
    Box3D {
        center: std::array::from_fn(|i| c[i] + d[i] * unit),
        size: std::array::from_fn(|i| s_ref * d[3 + i].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp()),
    }
}

/// Training target of one voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Negative,
    /// Inside a GT box but beyond the per-box positive budget; excluded from
    /// the classification loss.
    Ignored,
    Positive {
        gt: usize,
        class_id: usize,
        /// Center offset in units of `stride · voxel_size`, then log size
        /// relative to the level's reference size.
        regression: [f64; 6],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub level: usize,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub levels: Vec<LevelTargets>,
}

impl DetectionTargets {
    pub fn num_positives(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| &l.targets)
            .filter(|t| matches!(t, Target::Positive { .. }))
            .count()
    }
}

/// Center-inside assignment. Each voxel goes to the smallest-volume GT box
/// containing its center (lower index on ties); per box and level only the
/// `k_max` voxels nearest its center stay positive, the rest are ignored.
pub fn assign_targets(
    gt: &[GtBox],
    levels: &[(usize, &[Coord])],
    voxel_size: f64,
    k_max: usize,
) -> DetectionTargets {
    let levels = levels
        .iter()
        .map(|&(level, coords)| {
            let stride = 1usize << level;
            let unit = stride as f64 * voxel_size;
            let s_ref = 4.0 * unit;
            let mut owner: Vec<Option<usize>> = vec![None; coords.len()];
            let mut per_box: Vec<Vec<(f64, usize)>> = vec![Vec::new(); gt.len()];
            for (i, &c) in coords.iter().enumerate() {
                let center = level_center(c, stride, voxel_size);
                let mut best: Option<usize> = None;
                for (k, b) in gt.iter().enumerate() {
                    if b.bbox.contains(center)
                        && best.is_none_or(|j| b.bbox.volume() < gt[j].bbox.volume())
                    {
                        best = Some(k);
                    }
                }
                if let Some(k) = best {
                    owner[i] = Some(k);
                    let bc = gt[k].bbox.center;
                    let d2: f64 = (0..3).map(|a| (center[a] - bc[a]).powi(2)).sum();
                    per_box[k].push((d2, i));
                }
            }
            let mut targets = vec![Target::Negative; coords.len()];
            for (i, o) in owner.iter().enumerate() {
                if o.is_some() {
                    targets[i] = Target::Ignored;
                }
            }
            for (k, cands) in per_box.iter_mut().enumerate() {
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, i) in cands.iter().take(k_max) {
                    let center = level_center(coords[i], stride, voxel_size);
                    let b = &gt[k].bbox;
                    let mut r = [0.0; 6];
                    for a in 0..3 {
                        r[a] = (b.center[a] - center[a]) / unit;
                        r[3 + a] = (b.size[a] / s_ref).ln();
                    }
                    targets[i] = Target::Positive {
                        gt: k,
                        class_id: gt[k].class_id,
                        regression: r,
                    };
                }
            }
            LevelTargets { level, targets }
        })
        .collect();
    DetectionTargets { levels }
}

/// Per-row classification target for the focal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    Ignore,
    Background,
    Class(usize),
}

impl From<&Target> for ClsTarget {
    fn from(t: &Target) -> Self {
        match t {
            Target::Negative => ClsTarget::Background,
            Target::Ignored => ClsTarget::Ignore,
            Target::Positive { class_id, .. } => ClsTarget::Class(*class_id),
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let w = (1.0 - p).powf(gamma);
        (-alpha * w * log_p, alpha * w * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(x);
        let w = p.powf(gamma);
        (-(1.0 - alpha) * w * log_q, (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Unnormalized one-vs-all focal loss sum over non-ignored rows, its
/// gradient, and the number of positive rows.
pub fn focal_loss_sum(logits: &Tensor, targets: &[ClsTarget], alpha: f64, gamma: f64) -> (f64, Tensor, usize) {
    assert_eq!(logits.rows, targets.len(), "logits/targets misaligned");
    let mut grad = Tensor::zeros(logits.rows, logits.cols);
    let mut sum = 0.0;
    let mut positives = 0;
    for (r, t) in targets.iter().enumerate() {
        let class = match t {
            ClsTarget::Ignore => continue,
            ClsTarget::Background => None,
            ClsTarget::Class(c) => {
                positives += 1;
                Some(*c)
            }
        };
        let row = logits.row(r);
        let grow = grad.row_mut(r);
        for c in 0..row.len() {
            let (l, d) = focal_term(row[c], class == Some(c), alpha, gamma);
            sum += l;
            grow[c] = d;
        }
    }
    (sum, grad, positives)
}

/// Focal loss normalized by the number of positives (at least 1).
pub fn focal_loss(logits: &Tensor, targets: &[ClsTarget], alpha: f64, gamma: f64) -> f64 {
    let (s, _, n) = focal_loss_sum(logits, targets, alpha, gamma);
    s / n.max(1) as f64
}

/// Mean of `1 − IoU` over aligned pairs (0 for no pairs) with per-pair
/// gradients with respect to predicted center and size.
pub fn iou_loss_with_grad(pred: &[Box3D], gt: &[Box3D]) -> (f64, Vec<([f64; 3], [f64; 3])>) {
    assert_eq!(pred.len(), gt.len(), "iou_loss pairs misaligned");
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let (iou, dc, ds) = box_iou_grad(p, g);
        loss += 1.0 - iou;
        grads.push((dc.map(|v| -v / n), ds.map(|v| -v / n)));
    }
    (loss / n, grads)
}

pub fn iou_loss(pred: &[Box3D], gt: &[Box3D]) -> f64 {
    iou_loss_with_grad(pred, gt).0
}

/// Gradient of `decode_box` outputs back onto the six raw deltas.
pub fn decode_box_backward(
    stride: usize,
    voxel_size: f64,
    d: &[f64],
    d_center: [f64; 3],
    d_size: [f64; 3],
) -> [f64; 6] {
    let unit = stride as f64 * voxel_size;
    let s_ref = 4.0 * unit;
    let mut out = [0.0; 6];
    for a in 0..3 {
        out[a] = d_center[a] * unit;
        let raw = d[3 + a];
        out[3 + a] = if raw.abs() < LOG_SIZE_CLAMP {
            d_size[a] * s_ref * raw.exp()
        } else {
            0.0
        };
    }
    out
}

/// A decoded candidate before suppression.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub proposal: Proposal,
    pub level: usize,
    pub coord: Coord,
}

/// Orders candidates by descending score, then ascending voxel coordinate,
/// then level.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.proposal
        .score
        .total_cmp(&a.proposal.score)
        .then(a.coord.cmp(&b.coord))
        .then(a.level.cmp(&b.level))
}

/// Class-agnostic greedy NMS over candidates already sorted by
/// [`candidate_order`]. Returns the first `limit` kept indices in order.
pub fn greedy_nms(sorted: &[Candidate], nms_iou: f64, limit: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, c) in sorted.iter().enumerate() {
        if kept.len() == limit {
            break;
        }
        if kept
            .iter()
            .all(|&k| box_iou(&sorted[k].proposal.bbox, &c.proposal.bbox) < nms_iou)
        {
            kept.push(i);
        }
    }
    kept
}

/// All per-voxel candidates with score at or above the threshold, sorted.
pub fn candidates(head: &HeadOutput, voxel_size: f64, score_threshold: f64) -> Vec<Candidate> {
    let mut out = Vec::new();
    for lvl in &head.levels {
        let stride = 1usize << lvl.level;
        for (i, &coord) in lvl.coords.iter().enumerate() {
            let logits = lvl.cls_logits.row(i);
            let (class_id, max_logit) = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            let score = sigmoid(max_logit);
            if score < score_threshold {
                continue;
            }
            let bbox = decode_box(coord, stride, voxel_size, lvl.box_deltas.row(i));
            out.push(Candidate {
                proposal: Proposal { bbox, class_id, score },
                level: lvl.level,
                coord,
            });
        }
    }
    out.sort_by(candidate_order);
    out
}

/// Thresholds, decodes, suppresses and truncates the head outputs of one scene.
pub fn decode_proposals(head: &HeadOutput, voxel_size: f64, nms: &NmsConfig) -> Vec<Proposal> {
    let sorted = candidates(head, voxel_size, nms.score_threshold);
    greedy_nms(&sorted, nms.nms_iou, nms.max_proposals)
        .into_iter()
        .map(|i| sorted[i].proposal)
        .collect()
}
