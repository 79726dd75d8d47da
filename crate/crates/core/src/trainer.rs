//! Joint end-to-end training of detector and refiner.
//!
//! One optimizer step covers a batch of scenes packed into a single sparse
//! layout. The three loss terms are terminal nodes of one graph and are
//! summed in the fixed order `l_cls + l_reg + l_seg`, so the reported total
//! is bit-identical to the sum of the reported terms.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::detector::{
    assign_targets, decode_box, decode_box_backward, decode_proposals, focal_loss_sum, iou_loss_with_grad,
    strip_batch, ClsTarget, Proposal, Target,
};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::metrics::{evaluate, EvalOptions, MetricsReport, SceneGt};
use crate::model::Model;
use crate::nn::{Adam, Gradients, Graph, Var};
use crate::refiner::{instance_voxel_labels, match_for_training, seg_loss, InstanceMask, RoiBatch};
use crate::scene::{GtBox, PointCloud, Scene};
use crate::sparse::Layout;
use crate::tensor::Tensor;
use crate::voxel::{select_voxels, Coord, SparseGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch counts after which the learning rate drops; `None` places them
    /// at 280/330 and 320/330 of the run.
    pub lr_drops: Option<(usize, usize)>,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Also train the refiner on GT boxes during the first epochs.
    pub gt_warmup: bool,
    pub gt_warmup_fraction: f64,
    pub augment: bool,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 33,
            batch_size: 6,
            lr: 1e-3,
            lr_drops: None,
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            gt_warmup: true,
            gt_warmup_fraction: 0.1,
            augment: true,
            val_every: 3,
        }
    }
}

impl TrainConfig {
    pub fn drop_epochs(&self) -> (usize, usize) {
        self.lr_drops
            .unwrap_or((self.epochs * 280 / 330, self.epochs * 320 / 330))
    }

    /// Learning rate of the epoch with 0-based index `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (a, b) = self.drop_epochs();
        let drops = (epoch >= a) as i32 + (epoch >= b) as i32;
        self.lr * self.lr_drop_factor.powi(drops)
    }

    pub fn warmup_epochs(&self) -> usize {
        if self.gt_warmup {
            ((self.epochs as f64 * self.gt_warmup_fraction).floor() as usize).max(1)
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("epochs, batch_size and val_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some((a, b)) = self.lr_drops {
            if !(a < b && b < self.epochs) {
                return Err(Error::Config(format!(
                    "lr drop epochs ({a}, {b}) must be increasing and below {}",
                    self.epochs
                )));
            }
        }
        if !(self.lr_drop_factor > 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config("invalid lr_drop_factor, weight_decay or clip_norm".into()));
        }
        if !(0.0..=1.0).contains(&self.gt_warmup_fraction) {
            return Err(Error::Config("gt_warmup_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_seg: f64,
    pub total: f64,
}

/// A scene with a stable identifier (its file stem).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedScene {
    pub name: String,
    pub scene: Scene,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent generator for `(seed, a, b)`.
pub fn derived_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(a ^ splitmix(b))))
}

const SHUFFLE_STREAM: u64 = u64::MAX;

/// Rotates about the vertical axis through the cloud's xy-center by a random
/// multiple of 90° plus up to ±5°, then flips x and y with probability 1/2
/// each. GT boxes are recomputed as tight boxes of the moved points.
pub fn augment_scene(scene: &Scene, rng: &mut impl Rng) -> Result<Scene> {
    let quarter = rng.random_range(0..4) as f64;
    let jitter = rng.random_range(-5.0f64..=5.0).to_radians();
    let angle = quarter * std::f64::consts::FRAC_PI_2 + jitter;
    let flip = [rng.random_bool(0.5), rng.random_bool(0.5)];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &scene.cloud.points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let (s, co) = angle.sin_cos();
    let points = scene
        .cloud
        .points
        .iter()
        .map(|p| {
            let (x, y) = (p[0] - c[0], p[1] - c[1]);
            let mut q = [co * x - s * y, s * x + co * y];
            for a in 0..2 {
                if flip[a] {
                    q[a] = -q[a];
                }
            }
            [q[0] + c[0], q[1] + c[1], p[2]]
        })
        .collect();
    Scene::from_cloud(PointCloud {
        points,
        ..scene.cloud.clone()
    })
}

/// Which proposals the refiner trains on in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOptions {
    /// Detector proposals matched to GT by center distance and IoU.
    pub use_predicted: bool,
    /// Every GT box as an extra proposal for its own instance.
    pub inject_gt: bool,
}

pub struct LossEval {
    pub losses: LossBreakdown,
    pub grads: Gradients,
    pub positives: usize,
    pub rois: usize,
}

/// Refiner training RoIs of one scene: `(selected voxels, per-voxel labels)`.
fn scene_rois(
    model: &Model,
    grid: &SparseGrid,
    boxes: &[GtBox],
    instance_ids: &[i32],
    proposals: Option<&[Proposal]>,
    inject_gt: bool,
) -> Vec<(Vec<u32>, Vec<bool>)> {
    let rcfg = &model.cfg.refiner;
    let mut targets: Vec<(Box3D, usize)> = Vec::new();
    if let Some(props) = proposals {
        let m = match_for_training(boxes, props, rcfg.iou_match_threshold);
        targets.extend(m.pairs.iter().map(|&(k, j, _)| (props[j].bbox, k)));
    }
    if inject_gt {
        targets.extend(boxes.iter().enumerate().map(|(k, b)| (b.bbox, k)));
    }
    let mut labels: Vec<Option<Vec<bool>>> = vec![None; boxes.len()];
    let mut out = Vec::with_capacity(targets.len());
    for (bbox, k) in targets {
        let sel = select_voxels(&grid.coords, grid.voxel_size, &bbox);
        if sel.is_empty() {
            continue;
        }
        let lab = labels[k].get_or_insert_with(|| instance_voxel_labels(grid, instance_ids, k, rcfg.label_rule));
        let l = sel.iter().map(|&v| lab[v as usize]).collect();
        out.push((sel, l));
    }
    out
}

/// Adds the segmentation loss of the given RoIs as a terminal node.
fn seg_term(
    g: &mut Graph,
    model: &Model,
    features: Var,
    grids: &[&[Coord]],
    bases: &[u32],
    rois: &[(usize, Vec<u32>, Vec<bool>)],
) -> Var {
    let spec: Vec<(&[Coord], u32, &[u32])> = rois
        .iter()
        .map(|(b, sel, _)| (grids[*b], bases[*b], sel.as_slice()))
        .collect();
    let batch = RoiBatch::build(&spec);
    match model.refiner.unet_graph(g, features, &batch) {
        Some(lv) => {
            let labels: Vec<bool> = rois.iter().flat_map(|r| r.2.iter().copied()).collect();
            let (l, grad) = seg_loss(&g.value(lv).data, &labels);
            let n = grad.len();
            g.terminal(l, vec![(lv, Tensor::from_vec(n, 1, grad))])
        }
        None => g.terminal(0.0, Vec::new()),
    }
}

fn finish(g: &Graph, names: Vec<String>, terms: [Var; 3], total: Var, positives: usize, rois: usize) -> Result<LossEval> {
    let losses = LossBreakdown {
        l_cls: g.scalar(terms[0]),
        l_reg: g.scalar(terms[1]),
        l_seg: g.scalar(terms[2]),
        total: g.scalar(total),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            scenes: names,
            detail: format!("{losses:?}"),
        });
    }
    let grads = g.backward(total);
    if !grads.params.iter().flatten().all(Tensor::is_finite) {
        return Err(Error::NonFiniteLoss {
            scenes: names,
            detail: "non-finite gradient".into(),
        });
    }
    Ok(LossEval {
        losses,
        grads,
        positives,
        rois,
    })
}

/// Total loss of a batch and its gradient with respect to every parameter.
pub fn compute_losses(model: &Model, batch: &[NamedScene], opts: StepOptions) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let dcfg = &model.cfg.detector;
    let vs = dcfg.voxel_size;
    let grids: Vec<SparseGrid> = batch
        .iter()
        .map(|s| model.voxelize(&s.scene.cloud))
        .collect::<Result<_>>()?;
    let mut keys = Vec::new();
    let mut feats = Vec::new();
    let mut bases = Vec::with_capacity(grids.len());
    for (b, grid) in grids.iter().enumerate() {
        bases.push(keys.len() as u32);
        keys.extend(grid.coords.iter().map(|c| [b as i32, c[0], c[1], c[2]]));
        feats.extend_from_slice(&grid.features.data);
    }
    let features = Tensor::from_vec(keys.len(), dcfg.in_channels, feats);

    let mut g = Graph::new(&model.params);
    let bb = model.detector.backbone_graph(&mut g, Layout::from_sorted(keys), features);
    let heads = model.detector.heads_graph(&mut g, &bb);

    let mut cls_sum = 0.0;
    let mut positives = 0;
    let mut cls_grads = Vec::new();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    // (head index, row, stride, raw deltas) of every positive
    let mut pos_rows: Vec<(usize, usize, usize, [f64; 6])> = Vec::new();
    for (h, &(level, cvar, rvar)) in heads.levels.iter().enumerate() {
        let layout = &bb.pyramid.layouts[level];
        let stride = dcfg.stride(level);
        let mut targets = Vec::with_capacity(layout.len());
        for (b, s) in batch.iter().enumerate() {
            let range = layout.batch_range(b as i32);
            let coords = strip_batch(&layout.keys[range.clone()]);
            let t = assign_targets(&s.scene.boxes, &[(level, &coords)], vs, dcfg.k_max);
            for (i, tg) in t.levels[0].targets.iter().enumerate() {
                targets.push(ClsTarget::from(tg));
                if let Target::Positive { gt: k, .. } = tg {
                    let row = range.start + i;
                    let d: [f64; 6] = g.value(rvar).row(row).try_into().expect("6 deltas");
                    pred.push(decode_box(coords[i], stride, vs, &d));
                    gt.push(s.scene.boxes[*k].bbox);
                    pos_rows.push((h, row, stride, d));
                }
            }
        }
        let (s, grad, n) = focal_loss_sum(g.value(cvar), &targets, dcfg.focal_alpha, dcfg.focal_gamma);
        cls_sum += s;
        positives += n;
        cls_grads.push((cvar, grad));
    }
    let norm = positives.max(1) as f64;
    for (_, grad) in &mut cls_grads {
        grad.scale(1.0 / norm);
    }
    let cls = g.terminal(cls_sum / norm, cls_grads);

    let (l_reg, pair_grads) = iou_loss_with_grad(&pred, &gt);
    let mut reg_grads: Vec<(Var, Tensor)> = heads
        .levels
        .iter()
        .map(|&(_, _, r)| {
            let (rows, cols) = g.value(r).shape();
            (r, Tensor::zeros(rows, cols))
        })
        .collect();
    for (&(h, row, stride, d), (dc, ds)) in pos_rows.iter().zip(pair_grads) {
        let gd = decode_box_backward(stride, vs, &d, dc, ds);
        for (o, v) in reg_grads[h].1.row_mut(row).iter_mut().zip(gd) {
            *o += v;
        }
    }
    let reg = g.terminal(l_reg, if pred.is_empty() { Vec::new() } else { reg_grads });

    let mut rois = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        let proposals = opts.use_predicted.then(|| {
            let hv = model.detector.head_values(&g, &bb, &heads, b as i32);
            decode_proposals(&hv, vs, &dcfg.nms)
        });
        for (sel, lab) in scene_rois(
            model,
            &grids[b],
            &s.scene.boxes,
            &s.scene.cloud.instance_ids,
            proposals.as_deref(),
            opts.inject_gt,
        ) {
            rois.push((b, sel, lab));
        }
    }
    let coords: Vec<&[Coord]> = grids.iter().map(|gr| gr.coords.as_slice()).collect();
    let seg = seg_term(&mut g, model, bb.levels[0], &coords, &bases, &rois);

    let total = g.sum_scalars(&[cls, reg, seg]);
    let names = batch.iter().map(|s| s.name.clone()).collect();
    finish(&g, names, [cls, reg, seg], total, positives, rois.len())
}

/// One optimizer step on the batch.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[NamedScene],
    opts: StepOptions,
    lr: f64,
    clip_norm: f64,
) -> Result<LossEval> {
    let eval = compute_losses(model, batch, opts)?;
    adam.update(&mut model.params, &eval.grads.params, lr, clip_norm);
    Ok(eval)
}

/// Per-epoch record of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_seg: f64,
    pub total: f64,
    #[serde(rename = "val_AP")]
    pub val_ap: Option<f64>,
    #[serde(rename = "val_AP50")]
    pub val_ap50: Option<f64>,
    #[serde(rename = "val_AP25")]
    pub val_ap25: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub epochs_done: usize,
    pub best_val_ap: Option<f64>,
}

impl TrainState {
    pub fn fresh(run: &RunConfig) -> Result<TrainState> {
        let model = Model::new(run.model.clone(), run.seed)?;
        let adam = Adam::new(&model.params, run.train.weight_decay);
        Ok(TrainState {
            model,
            adam,
            epochs_done: 0,
            best_val_ap: None,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions<'a> {
    /// Where `last.ckpt`, `best.ckpt` and `train_log.jsonl` go.
    pub out_dir: Option<&'a Path>,
    /// Stop after this many completed epochs (simulates an interruption).
    pub stop_after: Option<usize>,
    pub progress: bool,
}

pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
    /// Optimizer steps taken by this call.
    pub steps: usize,
    /// Steps whose reported total differs in any bit from
    /// `l_cls + l_reg + l_seg` summed in that order.
    pub decomposition_mismatches: usize,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Masks for every scene and the resulting metrics.
pub fn evaluate_model(model: &Model, scenes: &[NamedScene], min_mask_size: usize) -> Result<(MetricsReport, Vec<Vec<InstanceMask>>)> {
    let preds = scenes
        .iter()
        .map(|s| model.infer(&s.scene.cloud).map(|p| p.masks))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<SceneGt> = scenes.iter().map(|s| SceneGt::from_cloud(&s.scene.cloud)).collect();
    let report = evaluate(
        &preds,
        &gts,
        &EvalOptions {
            num_classes: model.cfg.detector.num_classes,
            min_mask_size,
        },
    )?;
    Ok((report, preds))
}

/// Trains from `state` until `run.train.epochs` epochs are done.
pub fn fit(
    run: &RunConfig,
    train: &[NamedScene],
    val: &[NamedScene],
    mut state: TrainState,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = &run.train;
    cfg.validate()?;
    let mut log_file = match opts.out_dir {
        Some(dir) => {
            let path = dir.join(TRAIN_LOG);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(state.epochs_done > 0)
                .truncate(state.epochs_done == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut log = Vec::new();
    let (mut total_steps, mut mismatches) = (0usize, 0usize);
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.epochs_done..end {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_rng(run.seed, epoch as u64, SHUFFLE_STREAM));
        let step_opts = StepOptions {
            use_predicted: true,
            inject_gt: epoch < cfg.warmup_epochs(),
        };
        let lr = cfg.lr_at(epoch);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let scene = if cfg.augment {
                        augment_scene(&train[i].scene, &mut derived_rng(run.seed, epoch as u64, i as u64))?
                    } else {
                        train[i].scene.clone()
                    };
                    Ok(NamedScene {
                        name: train[i].name.clone(),
                        scene,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ev = train_step(&mut state.model, &mut state.adam, &batch, step_opts, lr, cfg.clip_norm)?;
            let l = ev.losses;
            if l.total.to_bits() != (l.l_cls + l.l_reg + l.l_seg).to_bits() {
                mismatches += 1;
            }
            total_steps += 1;
            for (s, v) in sums.iter_mut().zip([l.l_cls, l.l_reg, l.l_seg, l.total]) {
                *s += v;
            }
            steps += 1;
        }
        let mean = sums.map(|s| s / steps as f64);
        state.epochs_done = epoch + 1;

        let validate_now = !val.is_empty() && (state.epochs_done % cfg.val_every == 0 || state.epochs_done == cfg.epochs);
        let report = if validate_now {
            Some(evaluate_model(&state.model, val, run.min_mask_size)?.0)
        } else {
            None
        };
        let improved = report
            .as_ref()
            .is_some_and(|r| state.best_val_ap.is_none_or(|b| r.ap > b));
        if improved {
            state.best_val_ap = report.as_ref().map(|r| r.ap);
        }
        if let Some(dir) = opts.out_dir {
            if improved {
                save_checkpoint(&state, run, &dir.join(BEST_CHECKPOINT))?;
            }
            save_checkpoint(&state, run, &dir.join(LAST_CHECKPOINT))?;
        }
        let rec = EpochRecord {
            epoch: state.epochs_done,
            l_cls: mean[0],
            l_reg: mean[1],
            l_seg: mean[2],
            total: mean[3],
            val_ap: report.as_ref().map(|r| r.ap),
            val_ap50: report.as_ref().map(|r| r.ap50),
            val_ap25: report.as_ref().map(|r| r.ap25),
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some((path, f)) = log_file.as_mut() {
            writeln!(f, "{}", rec.to_json()).map_err(|e| Error::io(&*path, e))?;
        }
        if opts.progress {
            eprintln!("{}", rec.to_json());
        }
        log.push(rec);
    }
    Ok(FitOutcome {
        state,
        log,
        steps: total_steps,
        decomposition_mismatches: mismatches,
    })
}

/// A scene with the frozen detector's stride-1 features and proposals cached,
/// for training and evaluating refiners without rerunning the backbone.
#[derive(Debug, Clone)]
pub struct FrozenScene {
    pub name: String,
    pub grid: SparseGrid,
    pub features: Tensor,
    pub proposals: Vec<Proposal>,
    pub boxes: Vec<GtBox>,
    pub instance_ids: Vec<i32>,
    pub gt: SceneGt,
}

pub fn freeze_scene(model: &Model, s: &NamedScene) -> Result<FrozenScene> {
    let grid = model.voxelize(&s.scene.cloud)?;
    let (bb, proposals) = model.propose(&grid)?;
    Ok(FrozenScene {
        name: s.name.clone(),
        features: bb.levels[0].features.clone(),
        grid,
        proposals,
        boxes: s.scene.boxes.clone(),
        instance_ids: s.scene.cloud.instance_ids.clone(),
        gt: SceneGt::from_cloud(&s.scene.cloud),
    })
}

/// Segmentation loss of a batch of frozen scenes; only refiner parameters
/// receive gradients.
pub fn compute_seg_loss(model: &Model, batch: &[&FrozenScene], inject_gt: bool) -> Result<LossEval> {
    let mut g = Graph::new(&model.params);
    let mut bases = Vec::with_capacity(batch.len());
    let mut rows = 0u32;
    let mut data = Vec::new();
    for s in batch {
        bases.push(rows);
        rows += s.grid.len() as u32;
        data.extend_from_slice(&s.features.data);
    }
    let width = model.refiner.feature_channels();
    let features = g.constant(Tensor::from_vec(rows as usize, width, data));
    let mut rois = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        for (sel, lab) in scene_rois(model, &s.grid, &s.boxes, &s.instance_ids, Some(&s.proposals), inject_gt) {
            rois.push((b, sel, lab));
        }
    }
    let coords: Vec<&[Coord]> = batch.iter().map(|s| s.grid.coords.as_slice()).collect();
    let cls = g.terminal(0.0, Vec::new());
    let reg = g.terminal(0.0, Vec::new());
    let seg = seg_term(&mut g, model, features, &coords, &bases, &rois);
    let total = g.sum_scalars(&[cls, reg, seg]);
    let names = batch.iter().map(|s| s.name.clone()).collect();
    finish(&g, names, [cls, reg, seg], total, 0, rois.len())
}

/// Trains only the refiner on frozen scenes with the schedule of `cfg`
/// (no augmentation). Returns the mean segmentation loss per epoch.
pub fn fit_refiner(model: &mut Model, train: &[FrozenScene], cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    cfg.validate()?;
    if model.params.iter().all(|(n, _)| !n.starts_with("refiner.")) {
        return Ok(Vec::new());
    }
    let mut adam = Adam::new(&model.params, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_rng(seed, epoch as u64, SHUFFLE_STREAM));
        let inject = epoch < cfg.warmup_epochs();
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FrozenScene> = chunk.iter().map(|&i| &train[i]).collect();
            let ev = compute_seg_loss(model, &batch, inject)?;
            adam.update(&mut model.params, &ev.grads.params, cfg.lr_at(epoch), cfg.clip_norm);
            sum += ev.losses.l_seg;
            steps += 1;
        }
        losses.push(sum / steps as f64);
    }
    Ok(losses)
}

pub fn predict_frozen(model: &Model, s: &FrozenScene) -> Vec<InstanceMask> {
    model
        .refiner
        .predict_masks(&model.params, &s.grid, &s.features, &s.proposals)
}

pub fn evaluate_frozen(model: &Model, scenes: &[FrozenScene], min_mask_size: usize) -> Result<MetricsReport> {
    let preds: Vec<Vec<InstanceMask>> = scenes.iter().map(|s| predict_frozen(model, s)).collect();
    let gts: Vec<SceneGt> = scenes.iter().map(|s| s.gt.clone()).collect();
    evaluate(
        &preds,
        &gts,
        &EvalOptions {
            num_classes: model.cfg.detector.num_classes,
            min_mask_size,
        },
    )
}
