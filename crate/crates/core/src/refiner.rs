//! Per-proposal mask refinement: a tiny sparse U-Net labels every RoI voxel
//! foreground/background, trained with BCE against matched GT instances.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{sigmoid, Proposal};
use crate::error::{Error, Result};
use crate::geometry::box_iou;
use crate::nn::{he_normal, normal, Graph, ParamId, ParamStore, Var};
use crate::scene::GtBox;
use crate::sparse::{Key, KernelMap, Layout, Pyramid};
use crate::tensor::Tensor;
use crate::voxel::{select_voxels, Coord, SparseGrid};

pub const PRED_HEADER: &str = "TD3D-PRED v1";
pub const MAX_LEVELS: usize = 4;
pub const LOGIT_CLAMP: f64 = 30.0;

/// How a voxel of a matched RoI gets its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRule {
    /// Foreground if the voxel holds at least one point of the instance.
    AnyPoint,
    /// Foreground if the instance owns more than half of the voxel's points.
    Majority,
}

impl LabelRule {
    pub fn name(self) -> &'static str {
        match self {
            LabelRule::AnyPoint => "any",
            LabelRule::Majority => "majority",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "any" => Some(LabelRule::AnyPoint),
            "majority" => Some(LabelRule::Majority),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub iou_match_threshold: f64,
    pub label_rule: LabelRule,
    pub fg_threshold: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            levels: 2,
            base_channels: 16,
            iou_match_threshold: 0.25,
            label_rule: LabelRule::AnyPoint,
            fg_threshold: 0.5,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels > MAX_LEVELS {
            return Err(Error::Config(format!("refiner levels must be in 0..={MAX_LEVELS}, got {}", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("refiner base_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.iou_match_threshold) {
            return Err(Error::Config(format!(
                "iou_match_threshold must be in [0, 1), got {}",
                self.iou_match_threshold
            )));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return Err(Error::Config(format!("fg_threshold must be in (0, 1), got {}", self.fg_threshold)));
        }
        Ok(())
    }

    /// Logit above which a voxel is foreground.
    pub fn fg_logit(&self) -> f64 {
        (self.fg_threshold / (1.0 - self.fg_threshold)).ln()
    }
}

/// Per-point instance mask of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub point_mask: Vec<bool>,
    pub class_id: usize,
    pub score: f64,
}

impl InstanceMask {
    pub fn count(&self) -> usize {
        self.point_mask.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<u32> {
        self.point_mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(gt index, proposal index, iou)` in ascending GT order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_proposals: Vec<usize>,
}

/// Each GT in turn claims the nearest unclaimed proposal by center distance
/// (lower index on ties); the pair is kept only if its IoU exceeds `threshold`.
/// A rejected proposal stays unclaimed.
pub fn match_for_training(gt: &[GtBox], proposals: &[Proposal], threshold: f64) -> MatchResult {
    let mut claimed = vec![false; proposals.len()];
    let mut out = MatchResult::default();
    for (k, g) in gt.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, p) in proposals.iter().enumerate() {
            if claimed[j] {
                continue;
            }
            let d2: f64 = (0..3).map(|a| (p.bbox.center[a] - g.bbox.center[a]).powi(2)).sum();
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, j));
            }
        }
        match best {
            Some((_, j)) => {
                let iou = box_iou(&g.bbox, &proposals[j].bbox);
                if iou > threshold {
                    claimed[j] = true;
                    out.pairs.push((k, j, iou));
                } else {
                    out.unmatched_gt.push(k);
                }
            }
            None => out.unmatched_gt.push(k),
        }
    }
    out.unmatched_proposals = (0..proposals.len()).filter(|&j| !claimed[j]).collect();
    out
}

/// Ground-truth label of every grid voxel for instance `k`.
pub fn instance_voxel_labels(grid: &SparseGrid, instance_ids: &[i32], k: usize, rule: LabelRule) -> Vec<bool> {
    let mut hits = vec![0u32; grid.len()];
    let mut totals = vec![0u32; grid.len()];
    for (p, &v) in grid.point_to_voxel.iter().enumerate() {
        totals[v as usize] += 1;
        if instance_ids[p] == k as i32 {
            hits[v as usize] += 1;
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &t)| match rule {
            LabelRule::AnyPoint => h > 0,
            LabelRule::Majority => 2 * h > t,
        })
        .collect()
}

/// Mean BCE over all entries with logits clamped to ±30, and its gradient.
/// No entries gives loss 0.
pub fn seg_loss(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len(), "logits/labels misaligned");
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    let n = logits.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        let xc = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let y = if y { 1.0 } else { 0.0 };
        // softplus(x) − y·x
        let sp = if xc > 0.0 { xc + (-xc).exp().ln_1p() } else { xc.exp().ln_1p() };
        sum += sp - y * xc;
        grad.push(if x.abs() < LOGIT_CLAMP { (sigmoid(xc) - y) / n } else { 0.0 });
    }
    (sum / n, grad)
}

/// RoIs of one or more scenes packed into a single sparse layout with the
/// RoI index as the batch key.
#[derive(Debug, Clone)]
pub struct RoiBatch {
    pub keys: Vec<Key>,
    /// Row of each entry in the source feature matrix.
    pub rows: Vec<u32>,
    /// Position within the RoI's voxel extent, in [-1, 1] per axis.
    pub rel: Tensor,
    /// `offsets[r]..offsets[r + 1]` are RoI `r`'s entries.
    pub offsets: Vec<usize>,
}

impl RoiBatch {
    /// Each RoI is `(grid coords, first feature row of that grid, selected
    /// voxel indices ascending)`.
    pub fn build(rois: &[(&[Coord], u32, &[u32])]) -> RoiBatch {
        let total: usize = rois.iter().map(|r| r.2.len()).sum();
        let mut keys = Vec::with_capacity(total);
        let mut rows = Vec::with_capacity(total);
        let mut rel = Vec::with_capacity(3 * total);
        let mut offsets = vec![0];
        for (r, &(coords, base, sel)) in rois.iter().enumerate() {
            let mut lo = [i32::MAX; 3];
            let mut hi = [i32::MIN; 3];
            for &i in sel {
                let c = coords[i as usize];
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
            for &i in sel {
                let c = coords[i as usize];
                keys.push([r as i32, c[0], c[1], c[2]]);
                rows.push(base + i);
                for a in 0..3 {
                    let span = (hi[a] - lo[a]) as f64;
                    rel.push(if span > 0.0 {
                        2.0 * (c[a] - lo[a]) as f64 / span - 1.0
                    } else {
                        0.0
                    });
                }
            }
            offsets.push(keys.len());
        }
        RoiBatch {
            keys,
            rows,
            rel: Tensor::from_vec(total, 3, rel),
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn num_rois(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct UNetParams {
    stem: ConvParams,
    down: Vec<ConvParams>,
    enc: Vec<ConvParams>,
    up: Vec<ConvParams>,
    dec: Vec<ConvParams>,
    out: ConvParams,
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub cfg: RefinerConfig,
    feature_channels: usize,
    net: Option<UNetParams>,
}

impl Refiner {
    /// Registers parameters under `refiner.*`; `levels = 0` has none.
    /// `feature_channels` is the width of the backbone features it consumes.
    pub fn new(cfg: RefinerConfig, feature_channels: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let net = (cfg.levels > 0).then(|| {
            let ch = |l: usize| cfg.base_channels << l;
            let mut conv = |name: String, taps: usize, fan: usize, cin: usize, cout: usize| ConvParams {
                w: store.add(format!("{name}.w"), he_normal(rng, taps * cin, cout, fan * cin)),
                b: store.add(format!("{name}.b"), Tensor::zeros(1, cout)),
            };
            let stem = conv("refiner.stem".into(), 27, 14, feature_channels + 3, ch(0));
            let mut down = Vec::new();
            let mut enc = Vec::new();
            for l in 1..=cfg.levels {
                down.push(conv(format!("refiner.down{l}"), 8, 4, ch(l - 1), ch(l)));
                enc.push(conv(format!("refiner.enc{l}"), 27, 14, ch(l), ch(l)));
            }
            let mut up = Vec::new();
            let mut dec = Vec::new();
            for l in 0..cfg.levels {
                up.push(conv(format!("refiner.up{l}"), 8, 1, ch(l + 1), ch(l)));
                dec.push(conv(format!("refiner.dec{l}"), 27, 14, ch(l), ch(l)));
            }
            let out = ConvParams {
                w: store.add("refiner.out.w", normal(rng, ch(0), 1, 0.01)),
                b: store.add("refiner.out.b", Tensor::zeros(1, 1)),
            };
            UNetParams {
                stem,
                down,
                enc,
                up,
                dec,
                out,
            }
        });
        Ok(Refiner {
            cfg,
            feature_channels,
            net,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    fn conv_relu(g: &mut Graph, x: Var, p: &ConvParams, map: &Rc<KernelMap>) -> Var {
        let h = g.conv(x, p.w, map.clone());
        let h = g.bias(h, p.b);
        g.relu(h)
    }

    /// One logit per batch entry; `None` for the bypass (`levels = 0`) or an
    /// empty batch.
    pub fn unet_graph(&self, g: &mut Graph, features: Var, batch: &RoiBatch) -> Option<Var> {
        let net = self.net.as_ref()?;
        if batch.is_empty() {
            return None;
        }
        let levels = self.cfg.levels;
        let pyramid = Pyramid::build(Layout::from_sorted(batch.keys.clone()), levels + 1);
        let subm: Vec<Rc<KernelMap>> = pyramid.subm.into_iter().map(Rc::new).collect();
        let up_maps: Vec<Rc<KernelMap>> = pyramid.down.iter().map(|m| Rc::new(m.transpose())).collect();
        let down: Vec<Rc<KernelMap>> = pyramid.down.into_iter().map(Rc::new).collect();

        let x = g.gather(features, batch.rows.clone());
        let rel = g.constant(batch.rel.clone());
        let x = g.concat(x, rel);
        let mut h = Self::conv_relu(g, x, &net.stem, &subm[0]);
        let mut skips = vec![h];
        for l in 1..=levels {
            h = Self::conv_relu(g, h, &net.down[l - 1], &down[l - 1]);
            h = Self::conv_relu(g, h, &net.enc[l - 1], &subm[l]);
            skips.push(h);
        }
        for l in (0..levels).rev() {
            let u = Self::conv_relu(g, h, &net.up[l], &up_maps[l]);
            let s = g.add(u, skips[l]);
            h = Self::conv_relu(g, s, &net.dec[l], &subm[l]);
        }
        let o = g.matmul(h, net.out.w);
        Some(g.bias(o, net.out.b))
    }

    /// Logits per RoI from a scene's stride-1 backbone features (rows aligned
    /// with `coords`). The bypass yields `+∞` everywhere.
    pub fn forward(&self, params: &ParamStore, features: &Tensor, coords: &[Coord], rois: &[&[u32]]) -> Vec<Vec<f64>> {
        if self.net.is_none() {
            return rois.iter().map(|r| vec![f64::INFINITY; r.len()]).collect();
        }
        let spec: Vec<(&[Coord], u32, &[u32])> = rois.iter().map(|&r| (coords, 0u32, r)).collect();
        let batch = RoiBatch::build(&spec);
        let mut g = Graph::new(params);
        let f = g.constant(features.clone());
        let logits = match self.unet_graph(&mut g, f, &batch) {
            Some(v) => g.value(v).data.clone(),
            None => Vec::new(),
        };
        batch.offsets.windows(2).map(|w| logits[w[0]..w[1]].to_vec()).collect()
    }

    /// Masks for the given proposals, in proposal order; proposals with an
    /// empty RoI or an empty mask are dropped.
    pub fn predict_masks(
        &self,
        params: &ParamStore,
        grid: &SparseGrid,
        features: &Tensor,
        proposals: &[Proposal],
    ) -> Vec<InstanceMask> {
        let selections: Vec<Vec<u32>> = proposals
            .iter()
            .map(|p| select_voxels(&grid.coords, grid.voxel_size, &p.bbox))
            .collect();
        let kept: Vec<usize> = (0..proposals.len()).filter(|&j| !selections[j].is_empty()).collect();
        let rois: Vec<&[u32]> = kept.iter().map(|&j| selections[j].as_slice()).collect();
        let logits = self.forward(params, features, &grid.coords, &rois);
        let cut = self.cfg.fg_logit();
        let mut out = Vec::new();
        let mut fg = vec![false; grid.len()];
        for (r, &j) in kept.iter().enumerate() {
            let mut any = false;
            for (&v, &x) in rois[r].iter().zip(&logits[r]) {
                let on = x > cut;
                fg[v as usize] = on;
                any |= on;
            }
            if any {
                let point_mask = grid.point_to_voxel.iter().map(|&v| fg[v as usize]).collect();
                out.push(InstanceMask {
                    point_mask,
                    class_id: proposals[j].class_id,
                    score: proposals[j].score,
                });
            }
            for &v in rois[r] {
                fg[v as usize] = false;
            }
        }
        out
    }
}

pub fn predictions_to_string(masks: &[InstanceMask]) -> String {
    let mut s = String::new();
    s.push_str(PRED_HEADER);
    s.push('\n');
    for m in masks {
        let _ = writeln!(s, "{} {:e}", m.class_id, m.score);
        let idx: Vec<String> = m.indices().iter().map(u32::to_string).collect();
        s.push_str(&idx.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_predictions(masks: &[InstanceMask], path: &Path) -> Result<()> {
    std::fs::write(path, predictions_to_string(masks)).map_err(|e| Error::io(path, e))
}

/// Parses a prediction file for a scene of `num_points` points.
pub fn parse_predictions(text: &str, num_points: usize, path: &Path) -> Result<Vec<InstanceMask>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim_end() == PRED_HEADER => {}
        _ => return Err(Error::parse(path, 1, format!("expected header `{PRED_HEADER}`"))),
    }
    let mut out = Vec::new();
    while let Some((ln, head)) = lines.next() {
        if head.trim().is_empty() {
            continue;
        }
        let mut it = head.split_whitespace();
        let class_id: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(path, ln, "bad class id"))?;
        let score: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .filter(|s: &f64| (0.0..=1.0).contains(s))
            .ok_or_else(|| Error::parse(path, ln, "bad score"))?;
        if it.next().is_some() {
            return Err(Error::parse(path, ln, "trailing fields after score"));
        }
        let (ln, body) = lines
            .next()
            .ok_or_else(|| Error::parse(path, ln + 1, "missing point index line"))?;
        let mut point_mask = vec![false; num_points];
        let mut prev: Option<usize> = None;
        for t in body.split_whitespace() {
            let i: usize = t.parse().map_err(|_| Error::parse(path, ln, format!("bad index `{t}`")))?;
            if i >= num_points || prev.is_some_and(|p| i <= p) {
                return Err(Error::parse(path, ln, format!("index {i} out of range or not ascending")));
            }
            point_mask[i] = true;
            prev = Some(i);
        }
        out.push(InstanceMask {
            point_mask,
            class_id,
            score,
        });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path, num_points: usize) -> Result<Vec<InstanceMask>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, num_points, path)
}
