//! Randomized agreement between the production geometry/metric routines and
//! deliberately naive reimplementations.
//!
//! Geometry instances live on a dyadic lattice (voxel size 1/4, box faces on
//! multiples of 1/8) so every coordinate, center and volume is exact in f64
//! and inclusive-boundary cases are hit often; "agree exactly" is then a
//! bitwise comparison.

use boxseg::detector::{
    assign_targets, candidate_order, greedy_nms, Candidate, Proposal, Target,
};
use boxseg::geometry::{box_iou, Box3D};
use boxseg::metrics::{ap_thresholds, evaluate, EvalOptions, GtInstance, SceneGt};
use boxseg::refiner::{match_for_training, InstanceMask};
use boxseg::scene::GtBox;
use boxseg::tensor::Tensor;
use boxseg::voxel::{extract_roi, Coord, SparseGrid};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 1000;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + tag)
}

/// Box with faces on the 1/8 lattice inside [-1, 1]^3.
fn lattice_box(r: &mut impl Rng) -> Box3D {
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for a in 0..3 {
        let lo: i32 = r.random_range(-8..7);
        let hi: i32 = r.random_range(lo + 1..=8);
        min[a] = lo as f64 / 8.0;
        max[a] = hi as f64 / 8.0;
    }
    Box3D::from_min_max(min, max).unwrap()
}

/// Integer-corner box measured in unit cells, for the cell-counting IoU.
fn cell_box(r: &mut impl Rng) -> ([i32; 3], [i32; 3]) {
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        lo[a] = r.random_range(0..6);
        hi[a] = r.random_range(lo[a] + 1..=7);
    }
    (lo, hi)
}

fn cells_to_box(lo: [i32; 3], hi: [i32; 3]) -> Box3D {
    Box3D::from_min_max(lo.map(f64::from), hi.map(f64::from)).unwrap()
}

fn random_grid(r: &mut impl Rng, vs: f64) -> SparseGrid {
    let mut coords: Vec<Coord> = Vec::new();
    let n = r.random_range(0..40);
    for _ in 0..n {
        coords.push(std::array::from_fn(|_| r.random_range(-5..5)));
    }
    coords.sort();
    coords.dedup();
    let mut features = Tensor::zeros(coords.len(), 2);
    for i in 0..coords.len() {
        features.row_mut(i).copy_from_slice(&[i as f64, -(i as f64)]);
    }
    SparseGrid {
        voxel_size: vs,
        point_to_voxel: (0..coords.len() as u32).collect(),
        coords,
        features,
    }
}

pub fn extract_roi_matches_naive_containment() {
    let mut r = rng(1);
    for _ in 0..CASES {
        let grid = random_grid(&mut r, 0.25);
        let b = lattice_box(&mut r);
        let roi = extract_roi(&grid, &b);
        let (lo, hi) = (b.min(), b.max());
        let mut want = Vec::new();
        for (i, c) in grid.coords.iter().enumerate() {
            let inside = (0..3).all(|a| {
                let p = c[a] as f64 * 0.25 + 0.125;
                lo[a] <= p && p <= hi[a]
            });
            if inside {
                want.push(i as u32);
            }
        }
        assert_eq!(roi.voxel_indices, want);
        assert_eq!(roi.features.rows, want.len());
        for (k, &i) in want.iter().enumerate() {
            assert_eq!(roi.features.row(k), grid.features.row(i as usize));
        }
        assert_eq!(roi.proposal, b);
    }
}

pub fn box_iou_matches_cell_counting() {
    let mut r = rng(2);
    for _ in 0..CASES {
        let (alo, ahi) = cell_box(&mut r);
        let (blo, bhi) = cell_box(&mut r);
        let inside = |lo: [i32; 3], hi: [i32; 3], c: [i32; 3]| (0..3).all(|a| lo[a] <= c[a] && c[a] < hi[a]);
        let (mut inter, mut union) = (0u32, 0u32);
        for x in 0..7 {
            for y in 0..7 {
                for z in 0..7 {
                    let (ia, ib) = (inside(alo, ahi, [x, y, z]), inside(blo, bhi, [x, y, z]));
                    inter += (ia && ib) as u32;
                    union += (ia || ib) as u32;
                }
            }
        }
        let want = if inter == 0 { 0.0 } else { inter as f64 / union as f64 };
        let got = box_iou(&cells_to_box(alo, ahi), &cells_to_box(blo, bhi));
        assert_eq!(got.to_bits(), want.to_bits(), "{alo:?}{ahi:?} vs {blo:?}{bhi:?}");
    }
}

/// Candidates with distinct `(coord, level)`, as a head produces them.
fn random_candidates(r: &mut impl Rng) -> Vec<Candidate> {
    let n = r.random_range(0..25);
    let mut out: Vec<Candidate> = (0..n)
        .map(|_| Candidate {
            proposal: Proposal {
                bbox: lattice_box(r),
                class_id: r.random_range(0..3),
                // Coarse scores so ties are frequent.
                score: r.random_range(1..6) as f64 / 8.0,
            },
            level: r.random_range(1..4),
            coord: std::array::from_fn(|_| r.random_range(-2..3)),
        })
        .collect();
    out.sort_by_key(|c| (c.coord, c.level));
    out.dedup_by_key(|c| (c.coord, c.level));
    out.shuffle(r);
    out
}

/// Suppression formulation: repeatedly take the best remaining candidate and
/// discard everything overlapping it at or above the threshold.
fn nms_oracle(cands: &[Candidate], thr: f64, limit: usize) -> Vec<Candidate> {
    let mut pool: Vec<Candidate> = cands.to_vec();
    let mut kept = Vec::new();
    while !pool.is_empty() && kept.len() < limit {
        let best = (0..pool.len())
            .min_by(|&i, &j| {
                let (a, b) = (&pool[i], &pool[j]);
                (-a.proposal.score, a.coord, a.level)
                    .partial_cmp(&(-b.proposal.score, b.coord, b.level))
                    .unwrap()
            })
            .unwrap();
        let top = pool.swap_remove(best);
        pool.retain(|c| box_iou(&top.proposal.bbox, &c.proposal.bbox) < thr);
        kept.push(top);
    }
    kept
}

pub fn nms_matches_suppression_oracle() {
    let mut r = rng(3);
    for case in 0..CASES {
        let cands = random_candidates(&mut r);
        let thr = [0.1, 0.25, 0.35, 0.5, 1.0][case % 5];
        let limit = r.random_range(1..12);
        let mut sorted = cands.clone();
        sorted.shuffle(&mut r);
        sorted.sort_by(candidate_order);
        let got: Vec<(Proposal, usize, Coord)> = greedy_nms(&sorted, thr, limit)
            .into_iter()
            .map(|i| (sorted[i].proposal, sorted[i].level, sorted[i].coord))
            .collect();
        let want: Vec<(Proposal, usize, Coord)> = nms_oracle(&cands, thr, limit)
            .into_iter()
            .map(|c| (c.proposal, c.level, c.coord))
            .collect();
        assert_eq!(got, want);
    }
}

fn random_gt(r: &mut impl Rng, n: usize) -> Vec<GtBox> {
    (0..n)
        .map(|_| GtBox {
            bbox: lattice_box(r),
            class_id: r.random_range(0..3),
        })
        .collect()
}

pub fn target_assignment_matches_oracle() {
    let mut r = rng(4);
    let vs = 0.125;
    for _ in 0..CASES {
        let ng = r.random_range(0..4);
        let gt = random_gt(&mut r, ng);
        let k_max = r.random_range(1..6);
        let level_coords: Vec<(usize, Vec<Coord>)> = (1..3)
            .map(|level| {
                let mut c: Vec<Coord> = (0..r.random_range(0..30))
                    .map(|_| std::array::from_fn(|_| r.random_range(-4..4)))
                    .collect();
                c.sort();
                c.dedup();
                (level, c)
            })
            .collect();
        let levels: Vec<(usize, &[Coord])> = level_coords.iter().map(|(l, c)| (*l, c.as_slice())).collect();
        let got = assign_targets(&gt, &levels, vs, k_max);

        for ((level, coords), lt) in level_coords.iter().zip(&got.levels) {
            assert_eq!(lt.level, *level);
            let unit = (1 << level) as f64 * vs;
            let center = |c: &Coord| c.map(|v| (v as f64 + 0.5) * unit);
            let inside = |b: &Box3D, p: [f64; 3]| (0..3).all(|a| b.min()[a] <= p[a] && p[a] <= b.max()[a]);
            // Owner: smallest volume, then lowest index.
            let owner: Vec<Option<usize>> = coords
                .iter()
                .map(|c| {
                    (0..gt.len())
                        .filter(|&k| inside(&gt[k].bbox, center(c)))
                        .min_by(|&a, &b| gt[a].bbox.volume().partial_cmp(&gt[b].bbox.volume()).unwrap().then(a.cmp(&b)))
                })
                .collect();
            let d2 = |i: usize, k: usize| -> f64 {
                let p = center(&coords[i]);
                (0..3).map(|a| (p[a] - gt[k].bbox.center[a]).powi(2)).sum()
            };
            for (i, t) in lt.targets.iter().enumerate() {
                let want_kind = match owner[i] {
                    None => 0,
                    Some(k) => {
                        let rank = (0..coords.len())
                            .filter(|&j| owner[j] == Some(k) && (d2(j, k), j) < (d2(i, k), i))
                            .count();
                        if rank < k_max {
                            2
                        } else {
                            1
                        }
                    }
                };
                match (t, want_kind) {
                    (Target::Negative, 0) | (Target::Ignored, 1) => {}
                    (Target::Positive { gt: k, class_id, regression }, 2) => {
                        let k = *k;
                        assert_eq!(Some(k), owner[i]);
                        assert_eq!(*class_id, gt[k].class_id);
                        let p = center(&coords[i]);
                        for a in 0..3 {
                            assert_eq!(regression[a], (gt[k].bbox.center[a] - p[a]) / unit);
                            assert_eq!(regression[3 + a], (gt[k].bbox.size[a] / (4.0 * unit)).ln());
                        }
                    }
                    _ => panic!("voxel {i} level {level}: got {t:?}, oracle kind {want_kind}"),
                }
            }
        }
    }
}

pub fn training_match_matches_oracle() {
    let mut r = rng(5);
    for _ in 0..CASES {
        let ng = r.random_range(0..5);
        let gt = random_gt(&mut r, ng);
        let proposals: Vec<Proposal> = (0..r.random_range(0..7))
            .map(|_| Proposal {
                bbox: lattice_box(&mut r),
                class_id: 0,
                score: 0.5,
            })
            .collect();
        let thr = 0.25;
        let got = match_for_training(&gt, &proposals, thr);

        let mut free: Vec<usize> = (0..proposals.len()).collect();
        let mut pairs = Vec::new();
        let mut unmatched_gt = Vec::new();
        for (k, g) in gt.iter().enumerate() {
            let dist = |j: usize| -> f64 {
                (0..3)
                    .map(|a| (proposals[j].bbox.center[a] - g.bbox.center[a]).powi(2))
                    .sum()
            };
            let nearest = free
                .iter()
                .copied()
                .min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));
            match nearest {
                Some(j) if box_iou(&g.bbox, &proposals[j].bbox) > thr => {
                    free.retain(|&x| x != j);
                    pairs.push((k, j, box_iou(&g.bbox, &proposals[j].bbox)));
                }
                _ => unmatched_gt.push(k),
            }
        }
        assert_eq!(got.pairs, pairs);
        assert_eq!(got.unmatched_gt, unmatched_gt);
        assert_eq!(got.unmatched_proposals, free);
    }
}

// ---------------------------------------------------------------- metrics

/// Exact rational `num / den` with u128 parts.
#[derive(Clone, Copy, Debug)]
struct Q(u128, u128);

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Q {
    fn norm(self) -> Q {
        let g = gcd(self.0, self.1).max(1);
        Q(self.0 / g, self.1 / g)
    }
    fn add(self, o: Q) -> Q {
        Q(self.0 * o.1 + o.0 * self.1, self.1 * o.1).norm()
    }
    fn mul(self, o: Q) -> Q {
        Q(self.0 * o.0, self.1 * o.1).norm()
    }
    fn ge(self, o: Q) -> bool {
        self.0 * o.1 >= o.0 * self.1
    }
    fn f(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// All-point interpolated AP as an exact fraction: every true positive adds
/// `1 / num_gt` of recall at the best precision reachable at or after it.
fn ap_oracle(tp: &[bool], num_gt: usize) -> Q {
    if num_gt == 0 {
        return Q(0, 1);
    }
    let prec: Vec<Q> = (0..tp.len())
        .map(|i| Q(tp[..=i].iter().filter(|&&t| t).count() as u128, (i + 1) as u128).norm())
        .collect();
    let mut ap = Q(0, 1);
    for i in 0..tp.len() {
        if tp[i] {
            let best = prec[i..].iter().copied().fold(Q(0, 1), |m, p| if p.ge(m) { p } else { m });
            ap = ap.add(best.mul(Q(1, num_gt as u128)));
        }
    }
    ap
}

struct Toy {
    preds: Vec<Vec<InstanceMask>>,
    gts: Vec<SceneGt>,
}

fn random_toy(r: &mut impl Rng) -> Toy {
    let scenes = r.random_range(1..3);
    let mut gt_left = r.random_range(1..=5);
    let mut pred_left = r.random_range(0..=8);
    let mut toy = Toy {
        preds: Vec::new(),
        gts: Vec::new(),
    };
    for s in 0..scenes {
        let n = 12;
        let last = s + 1 == scenes;
        let ng = if last { gt_left } else { r.random_range(0..=gt_left) };
        let np = if last { pred_left } else { r.random_range(0..=pred_left) };
        gt_left -= ng;
        pred_left -= np;
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(r);
        let instances = (0..ng)
            .map(|k| GtInstance {
                class_id: r.random_range(0..2),
                // Disjoint pairs of points.
                points: {
                    let mut p = order[k * 2..k * 2 + 2].to_vec();
                    p.sort();
                    p
                },
            })
            .collect();
        toy.gts.push(SceneGt {
            num_points: n,
            instances,
        });
        toy.preds.push(
            (0..np)
                .map(|_| InstanceMask {
                    point_mask: (0..n).map(|_| r.random_bool(0.3)).collect(),
                    class_id: r.random_range(0..2),
                    score: r.random_range(1..5) as f64 / 4.0,
                })
                .collect(),
        );
    }
    toy
}

/// Hand-enumerated evaluation: list every prediction of the class in rank
/// order, match greedily, and read AP off the exact PR curve.
fn eval_oracle(toy: &Toy, classes: usize) -> (f64, f64, f64, f64, f64) {
    let thresholds = ap_thresholds();
    let mut per_class = Vec::new();
    let (mut tp50_all, mut npred_all, mut ngt_all) = (0, 0, 0);
    for c in 0..classes {
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (s, ps) in toy.preds.iter().enumerate() {
            for (m, p) in ps.iter().enumerate() {
                if p.class_id == c && p.point_mask.iter().any(|&b| b) {
                    ranked.push((p.score, s, m));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        let num_gt = toy.gts.iter().flat_map(|g| &g.instances).filter(|g| g.class_id == c).count();
        let tp_at = |t: f64| -> Vec<bool> {
            let mut used: Vec<Vec<bool>> = toy.gts.iter().map(|g| vec![false; g.instances.len()]).collect();
            ranked
                .iter()
                .map(|&(_, s, m)| {
                    let pm = &toy.preds[s][m].point_mask;
                    let mut best: Option<(f64, usize)> = None;
                    for (k, g) in toy.gts[s].instances.iter().enumerate() {
                        if g.class_id != c || used[s][k] {
                            continue;
                        }
                        let inter = g.points.iter().filter(|&&i| pm[i as usize]).count();
                        let union = pm.iter().filter(|&&b| b).count() + g.points.len() - inter;
                        let iou = inter as f64 / union as f64;
                        if iou >= t && best.is_none_or(|(bi, _)| iou > bi) {
                            best = Some((iou, k));
                        }
                    }
                    if let Some((_, k)) = best {
                        used[s][k] = true;
                    }
                    best.is_some()
                })
                .collect()
        };
        let tp50 = tp_at(0.5);
        tp50_all += tp50.iter().filter(|&&t| t).count();
        npred_all += ranked.len();
        ngt_all += num_gt;
        if num_gt == 0 {
            continue;
        }
        let ap = thresholds.iter().map(|&t| ap_oracle(&tp_at(t), num_gt).f()).sum::<f64>() / thresholds.len() as f64;
        per_class.push((ap, ap_oracle(&tp50, num_gt).f(), ap_oracle(&tp_at(0.25), num_gt).f()));
    }
    let mean = |f: fn(&(f64, f64, f64)) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (
        mean(|c| c.0),
        mean(|c| c.1),
        mean(|c| c.2),
        ratio(tp50_all, npred_all),
        ratio(tp50_all, ngt_all),
    )
}

/// Summation order differs between the oracle (exact fractions) and the
/// implementation (running f64 sums); this is the only slack allowed.
const METRIC_TOL: f64 = 1e-12;

pub fn evaluate_matches_pr_curve_oracle() {
    let mut r = rng(6);
    let opts = EvalOptions {
        num_classes: 2,
        min_mask_size: 1,
    };
    for case in 0..400 {
        let toy = random_toy(&mut r);
        let got = evaluate(&toy.preds, &toy.gts, &opts).unwrap();
        let want = eval_oracle(&toy, 2);
        let pairs = [
            (got.ap, want.0),
            (got.ap50, want.1),
            (got.ap25, want.2),
            (got.prec50, want.3),
            (got.rec50, want.4),
        ];
        for (g, w) in pairs {
            assert!((g - w).abs() <= METRIC_TOL, "case {case}: got {g}, oracle {w}");
        }
        assert!(got.ap <= got.ap50 + METRIC_TOL && got.ap50 <= got.ap25 + METRIC_TOL, "case {case}: nesting");
    }
}

pub fn perfect_predictions_score_one() {
    let mut r = rng(7);
    let opts = EvalOptions {
        num_classes: 2,
        min_mask_size: 1,
    };
    for _ in 0..200 {
        let toy = random_toy(&mut r);
        let preds: Vec<Vec<InstanceMask>> = toy
            .gts
            .iter()
            .map(|g| {
                g.instances
                    .iter()
                    .map(|inst| InstanceMask {
                        point_mask: (0..g.num_points as u32).map(|i| inst.points.contains(&i)).collect(),
                        class_id: inst.class_id,
                        score: 0.9,
                    })
                    .collect()
            })
            .collect();
        let rep = evaluate(&preds, &toy.gts, &opts).unwrap();
        assert_eq!((rep.ap, rep.ap50, rep.ap25, rep.prec50, rep.rec50), (1.0, 1.0, 1.0, 1.0, 1.0));
    }
}
