//! Instance-mask AP evaluation and inference timing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refiner::InstanceMask;
use crate::scene::PointCloud;

/// Thresholds averaged into AP: 0.50, 0.55, …, 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class_id: usize,
    /// Ascending point indices.
    pub points: Vec<u32>,
}

/// Ground-truth instances of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGt {
    pub num_points: usize,
    pub instances: Vec<GtInstance>,
}

impl SceneGt {
    pub fn from_cloud(cloud: &PointCloud) -> SceneGt {
        let classes = cloud.instance_classes();
        SceneGt {
            num_points: cloud.len(),
            instances: classes
                .iter()
                .enumerate()
                .map(|(k, &class_id)| GtInstance {
                    class_id,
                    points: cloud.instance_points(k),
                })
                .collect(),
        }
    }
}

/// |pred ∩ gt| / |pred ∪ gt| over point indices.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Err(Error::InvalidInput("mask IoU of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub per_class_ap: BTreeMap<usize, ClassAp>,
    pub prec50: f64,
    pub rec50: f64,
    pub runtime_median_s: Option<f64>,
    pub runtime_p90_s: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "ap,ap50,ap25,prec50,rec50,runtime_median_s,runtime_p90_s";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.ap,
            self.ap50,
            self.ap25,
            self.prec50,
            self.rec50,
            opt(self.runtime_median_s),
            opt(self.runtime_p90_s)
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub num_classes: usize,
    /// Predicted masks with fewer points are discarded before matching.
    pub min_mask_size: usize,
}

/// Outcome of greedy matching at one threshold for one class: per ranked
/// prediction whether it was a true positive, and the GT count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatches {
    pub tp: Vec<bool>,
    pub num_gt: usize,
}

/// All-point interpolated area under the PR curve of ranked TP flags.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_rec = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_rec) * p;
        prev_rec = *r;
    }
    ap
}

struct Ranked {
    scene: usize,
    /// IoU with each same-scene GT instance.
    ious: Vec<f64>,
}

fn scene_ious(pred: &InstanceMask, gt: &SceneGt) -> Vec<f64> {
    let pred_count = pred.count();
    gt.instances
        .iter()
        .map(|g| {
            let inter = g.points.iter().filter(|&&i| pred.point_mask[i as usize]).count();
            let union = pred_count + g.points.len() - inter;
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect()
}

/// Greedy score-order matching at `threshold` for class `class_id`.
fn match_class(ranked: &[Ranked], gts: &[SceneGt], class_id: usize, threshold: f64) -> ClassMatches {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.instances.len()]).collect();
    let tp = ranked
        .iter()
        .map(|r| {
            let gt = &gts[r.scene];
            let mut best: Option<(f64, usize)> = None;
            for (k, g) in gt.instances.iter().enumerate() {
                if g.class_id != class_id || used[r.scene][k] || r.ious[k] < threshold {
                    continue;
                }
                if best.is_none_or(|(b, _)| r.ious[k] > b) {
                    best = Some((r.ious[k], k));
                }
            }
            match best {
                Some((_, k)) => {
                    used[r.scene][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    let num_gt = gts
        .iter()
        .flat_map(|g| &g.instances)
        .filter(|g| g.class_id == class_id)
        .count();
    ClassMatches { tp, num_gt }
}

pub fn evaluate(predictions: &[Vec<InstanceMask>], gts: &[SceneGt], opts: &EvalOptions) -> Result<MetricsReport> {
    if predictions.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction sets for {} scenes",
            predictions.len(),
            gts.len()
        )));
    }
    let mut by_class: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); opts.num_classes];
    let mut ious: Vec<Vec<Vec<f64>>> = Vec::with_capacity(gts.len());
    for (s, (preds, gt)) in predictions.iter().zip(gts).enumerate() {
        if let Some(g) = gt.instances.iter().find(|g| g.class_id >= opts.num_classes) {
            return Err(Error::InvalidInput(format!("scene {s}: GT class {} is unknown", g.class_id)));
        }
        let mut scene = Vec::with_capacity(preds.len());
        for (m, p) in preds.iter().enumerate() {
            if p.class_id >= opts.num_classes {
                return Err(Error::InvalidInput(format!(
                    "scene {s}, mask {m}: class {} is unknown",
                    p.class_id
                )));
            }
            if p.point_mask.len() != gt.num_points {
                return Err(Error::InvalidInput(format!(
                    "scene {s}, mask {m}: {} points, scene has {}",
                    p.point_mask.len(),
                    gt.num_points
                )));
            }
            scene.push(scene_ious(p, gt));
            if p.count() >= opts.min_mask_size.max(1) {
                by_class[p.class_id].push((p.score, s, m));
            }
        }
        ious.push(scene);
    }

    let thresholds = ap_thresholds();
    let mut per_class_ap = BTreeMap::new();
    let (mut tp50, mut npred, mut ngt) = (0usize, 0usize, 0usize);
    for (c, preds) in by_class.iter_mut().enumerate() {
        preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let ranked: Vec<Ranked> = preds
            .iter()
            .map(|&(_, s, m)| Ranked {
                scene: s,
                ious: ious[s][m].clone(),
            })
            .collect();
        let at = |t: f64| match_class(&ranked, gts, c, t);
        let m50 = at(0.5);
        npred += ranked.len();
        ngt += m50.num_gt;
        tp50 += m50.tp.iter().filter(|&&t| t).count();
        if m50.num_gt == 0 {
            continue;
        }
        let ap = thresholds
            .iter()
            .map(|&t| {
                let m = at(t);
                average_precision(&m.tp, m.num_gt)
            })
            .sum::<f64>()
            / thresholds.len() as f64;
        let m25 = at(0.25);
        per_class_ap.insert(
            c,
            ClassAp {
                ap,
                ap50: average_precision(&m50.tp, m50.num_gt),
                ap25: average_precision(&m25.tp, m25.num_gt),
            },
        );
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class_ap.is_empty() {
            0.0
        } else {
            per_class_ap.values().map(f).sum::<f64>() / per_class_ap.len() as f64
        }
    };
    Ok(MetricsReport {
        ap: mean(|c| c.ap),
        ap50: mean(|c| c.ap50),
        ap25: mean(|c| c.ap25),
        prec50: if npred == 0 { 0.0 } else { tp50 as f64 / npred as f64 },
        rec50: if ngt == 0 { 0.0 } else { tp50 as f64 / ngt as f64 },
        per_class_ap,
        runtime_median_s: None,
        runtime_p90_s: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub median_s: f64,
    pub p90_s: f64,
    pub samples: usize,
}

/// Median (mean of the middle pair for even counts) and nearest-rank p90.
pub fn runtime_stats(samples: &[f64]) -> RuntimeStats {
    assert!(!samples.is_empty(), "no timing samples");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let rank = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
    RuntimeStats {
        median_s: median,
        p90_s: s[rank - 1],
        samples: n,
    }
}

/// Times `run` on every item `repeats` times; the first pass over the items
/// is a discarded warm-up.
pub fn benchmark<T, R>(items: &[T], repeats: usize, mut run: impl FnMut(&T) -> Result<R>) -> Result<RuntimeStats> {
    if repeats < 3 {
        return Err(Error::Config(format!("benchmark needs at least 3 repeats, got {repeats}")));
    }
    if items.is_empty() {
        return Err(Error::Data("benchmark needs at least one scene".into()));
    }
    let mut samples = Vec::with_capacity((repeats - 1) * items.len());
    for rep in 0..repeats {
        for item in items {
            let t = Instant::now();
            std::hint::black_box(run(item)?);
            if rep > 0 {
                samples.push(t.elapsed().as_secs_f64());
            }
        }
    }
    Ok(runtime_stats(&samples))
}
