//! U-Net depth and proposal-count sweeps over one trained model.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::RunConfig;
use crate::detector::{decode_proposals, HeadOutput, NmsConfig};
use crate::error::{Error, Result};
use crate::metrics::{runtime_stats, MetricsReport};
use crate::model::Model;
use crate::refiner::MAX_LEVELS;
use crate::trainer::{evaluate_frozen, evaluate_model, fit_refiner, freeze_scene, NamedScene};

#[derive(Debug, Clone)]
pub struct LevelRow {
    pub levels: usize,
    pub report: MetricsReport,
}

/// For every depth, trains a fresh refiner on the frozen detector of `model`
/// and evaluates it on `val`.
pub fn unet_levels(
    model: &Model,
    run: &RunConfig,
    train: &[NamedScene],
    val: &[NamedScene],
    levels: &[usize],
) -> Result<Vec<LevelRow>> {
    if let Some(&l) = levels.iter().find(|&&l| l > MAX_LEVELS) {
        return Err(Error::Config(format!("unet level {l} outside 0..={MAX_LEVELS}")));
    }
    let ftrain = train.iter().map(|s| freeze_scene(model, s)).collect::<Result<Vec<_>>>()?;
    let fval = val.iter().map(|s| freeze_scene(model, s)).collect::<Result<Vec<_>>>()?;
    levels
        .iter()
        .map(|&l| {
            let mut rcfg = run.model.refiner.clone();
            rcfg.levels = l;
            let mut m = model.with_refiner(rcfg, run.seed)?;
            fit_refiner(&mut m, &ftrain, &run.train, run.seed)?;
            Ok(LevelRow {
                levels: l,
                report: evaluate_frozen(&m, &fval, run.min_mask_size)?,
            })
        })
        .collect()
}

pub fn levels_csv(rows: &[LevelRow]) -> String {
    let mut s = String::from("levels,ap,ap50,ap25,prec50,rec50\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.levels, m.ap, m.ap50, m.ap25, m.prec50, m.rec50
        );
    }
    s
}

/// Mean number of proposals per scene under `nms` (uncapped when
/// `max_proposals` is `usize::MAX`).
pub fn mean_proposals(heads: &[HeadOutput], voxel_size: f64, nms: &NmsConfig) -> f64 {
    let total: usize = heads.iter().map(|h| decode_proposals(h, voxel_size, nms).len()).sum();
    total as f64 / heads.len().max(1) as f64
}

const SCORE_LADDER: [f64; 6] = [0.02, 0.01, 0.005, 0.002, 0.001, 0.0];
const IOU_LADDER: [f64; 8] = [0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.0];

/// NMS settings yielding about `target` proposals per scene: keep `base`
/// when it already produces enough uncapped proposals, otherwise lower the
/// score threshold, then raise the IoU threshold, until it does; finally cap
/// at `target`. Loosening only ever adds lower-ranked proposals first.
pub fn calibrate_nms(heads: &[HeadOutput], voxel_size: f64, base: &NmsConfig, target: usize) -> NmsConfig {
    let uncapped = |score_threshold: f64, nms_iou: f64| NmsConfig {
        score_threshold,
        nms_iou,
        max_proposals: usize::MAX,
    };
    let mut ladder = vec![(base.score_threshold, base.nms_iou)];
    ladder.extend(SCORE_LADDER.iter().filter(|&&s| s < base.score_threshold).map(|&s| (s, base.nms_iou)));
    let floor = ladder.last().expect("non-empty").0;
    ladder.extend(IOU_LADDER.iter().filter(|&&i| i > base.nms_iou).map(|&i| (floor, i)));
    let (s, i) = ladder
        .iter()
        .copied()
        .find(|&(s, i)| mean_proposals(heads, voxel_size, &uncapped(s, i)) >= target as f64)
        .unwrap_or(*ladder.last().expect("non-empty"));
    NmsConfig {
        score_threshold: s,
        nms_iou: i,
        max_proposals: target,
    }
}

#[derive(Debug, Clone)]
pub struct CapRow {
    pub target: usize,
    pub nms: NmsConfig,
    pub mean_proposals: f64,
    pub report: MetricsReport,
}

/// Evaluates `model` under NMS settings calibrated to each target count and
/// times full inference. Timing interleaves the settings within every repeat
/// so slow drift of the machine affects all rows alike; the first repeat is
/// a discarded warm-up.
pub fn proposal_cap(model: &Model, run: &RunConfig, val: &[NamedScene], targets: &[usize], repeats: usize) -> Result<Vec<CapRow>> {
    if repeats < 3 {
        return Err(Error::Config(format!("benchmark needs at least 3 repeats, got {repeats}")));
    }
    if val.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    let vs = model.cfg.detector.voxel_size;
    let heads = val
        .iter()
        .map(|s| {
            let grid = model.voxelize(&s.scene.cloud)?;
            let bb = model.detector.backbone_forward(&model.params, &grid)?;
            Ok(model.detector.head_forward(&model.params, &bb))
        })
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<(NmsConfig, Model)> = targets
        .iter()
        .map(|&t| {
            let nms = calibrate_nms(&heads, vs, &run.model.detector.nms, t);
            let mut m = model.clone();
            m.cfg.detector.nms = nms;
            m.detector.cfg.nms = nms;
            (nms, m)
        })
        .collect();
    let mut samples = vec![Vec::new(); models.len()];
    for rep in 0..repeats {
        for (k, (_, m)) in models.iter().enumerate() {
            for s in val {
                let t = Instant::now();
                std::hint::black_box(m.infer(&s.scene.cloud)?);
                if rep > 0 {
                    samples[k].push(t.elapsed().as_secs_f64());
                }
            }
        }
    }
    targets
        .iter()
        .zip(&models)
        .zip(&samples)
        .map(|((&target, (nms, m)), smp)| {
            let (mut report, _) = evaluate_model(m, val, run.min_mask_size)?;
            let st = runtime_stats(smp);
            report.runtime_median_s = Some(st.median_s);
            report.runtime_p90_s = Some(st.p90_s);
            Ok(CapRow {
                target,
                nms: *nms,
                mean_proposals: mean_proposals(&heads, vs, nms),
                report,
            })
        })
        .collect()
}

pub fn caps_csv(rows: &[CapRow]) -> String {
    let mut s = String::from(
        "target,mean_proposals,score_threshold,nms_iou,max_proposals,ap,ap50,ap25,runtime_median_s,runtime_p90_s\n",
    );
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{:.2},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.target,
            r.mean_proposals,
            r.nms.score_threshold,
            r.nms.nms_iou,
            r.nms.max_proposals,
            m.ap,
            m.ap50,
            m.ap25,
            m.runtime_median_s.unwrap_or(f64::NAN),
            m.runtime_p90_s.unwrap_or(f64::NAN)
        );
    }
    s
}
