//! Central finite-difference checks of every analytic gradient.

use boxseg::detector::{focal_loss, focal_loss_sum, iou_loss, iou_loss_with_grad, ClsTarget};
use boxseg::geometry::Box3D;
use boxseg::model::Model;
use boxseg::refiner::seg_loss;
use boxseg::scene::generate_scene;
use boxseg::tensor::Tensor;
use boxseg::trainer::{compute_losses, NamedScene, StepOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 50;
const MAX_REL_ERR: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely; central
/// differences cannot resolve them relatively.
const ABS_FLOOR: f64 = 1e-7;

/// Floor for the whole-model check: the total loss is O(1), so rounding in a
/// difference with step 1e-5 is ~1e-11 and gradients below 1e-5 are not
/// resolvable to 1e-4 relative.
const COMPOSITE_FLOOR: f64 = 1e-5;

fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, ABS_FLOOR)
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn focal_loss_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let rows = r.random_range(1..6);
        let cols = 3;
        let data: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-4.0..4.0)).collect();
        let logits = Tensor::from_vec(rows, cols, data);
        let targets: Vec<ClsTarget> = (0..rows)
            .map(|_| match r.random_range(0..5) {
                0 => ClsTarget::Ignore,
                1 => ClsTarget::Background,
                _ => ClsTarget::Class(r.random_range(0..cols)),
            })
            .collect();
        let (_, grad, n) = focal_loss_sum(&logits, &targets, 0.25, 2.0);
        for i in 0..rows * cols {
            let mut f = |v: f64| {
                let mut l = logits.clone();
                l.data[i] = v;
                focal_loss(&l, &targets, 0.25, 2.0)
            };
            let num = central(&mut f, logits.data[i], 1e-5);
            let ana = grad.data[i] / n.max(1) as f64;
            assert!(rel_err(ana, num) < MAX_REL_ERR, "entry {i}: {ana} vs {num}");
        }
    }
}

/// Overlapping pair whose faces are all at least 1e-2 apart, so the
/// difference stencil never crosses a kink of the overlap function.
fn overlapping_pair(r: &mut impl Rng) -> (Box3D, Box3D) {
    loop {
        let rand_box = |r: &mut dyn rand::RngCore| {
            Box3D::new(
                std::array::from_fn(|_| r.random_range(-0.2..0.2)),
                std::array::from_fn(|_| r.random_range(0.1..0.5)),
            )
            .unwrap()
        };
        let (p, g) = (rand_box(r), rand_box(r));
        let (pmin, pmax, gmin, gmax) = (p.min(), p.max(), g.min(), g.max());
        let clear = (0..3).all(|a| {
            (pmin[a] - gmin[a]).abs() > 1e-2
                && (pmax[a] - gmax[a]).abs() > 1e-2
                && pmin[a] < gmax[a] - 1e-2
                && gmin[a] < pmax[a] - 1e-2
        });
        if clear {
            return (p, g);
        }
    }
}

pub fn iou_loss_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..INSTANCES {
        let n = r.random_range(1..4);
        let (pred, gt): (Vec<Box3D>, Vec<Box3D>) = (0..n).map(|_| overlapping_pair(&mut r)).unzip();
        let (_, grads) = iou_loss_with_grad(&pred, &gt);
        for k in 0..n {
            for a in 0..6 {
                let mut f = |v: f64| {
                    let mut p = pred.clone();
                    if a < 3 {
                        p[k].center[a] = v;
                    } else {
                        p[k].size[a - 3] = v;
                    }
                    iou_loss(&p, &gt)
                };
                let x = if a < 3 { pred[k].center[a] } else { pred[k].size[a - 3] };
                let num = central(&mut f, x, 1e-6);
                let ana = if a < 3 { grads[k].0[a] } else { grads[k].1[a - 3] };
                assert!(rel_err(ana, num) < MAX_REL_ERR, "box {k} coord {a}: {ana} vs {num}");
            }
        }
    }
}

pub fn seg_loss_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..INSTANCES {
        let n = r.random_range(1..20);
        let logits: Vec<f64> = (0..n).map(|_| r.random_range(-6.0..6.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let (_, grad) = seg_loss(&logits, &labels);
        for i in 0..n {
            let mut f = |v: f64| {
                let mut l = logits.clone();
                l[i] = v;
                seg_loss(&l, &labels).0
            };
            let num = central(&mut f, logits[i], 1e-5);
            assert!(rel_err(grad[i], num) < MAX_REL_ERR, "entry {i}: {} vs {num}", grad[i]);
        }
    }
}


/// Whole detector + refiner loss against every parameter. The refiner trains
/// on injected GT boxes only, so the RoI set does not move with the weights.
/// A coordinate whose one-sided differences disagree sits on a ReLU kink and
/// is replaced by another draw.
pub fn composite_loss_gradient() {
    let run = super::tiny_run();
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let opts = StepOptions {
        use_predicted: false,
        inject_gt: true,
    };
    let mut kinks = 0;
    let mut checked = 0;
    for inst in 0..INSTANCES {
        let scene = generate_scene(&run.scene_config(100 + inst as u64)).unwrap();
        let batch = vec![NamedScene {
            name: format!("tiny{inst}"),
            scene,
        }];
        let mut model = Model::new(run.model.clone(), inst as u64).unwrap();
        let eval = compute_losses(&model, &batch, opts).unwrap();
        assert!(eval.rois > 0);
        let total_scalars = model.params.num_scalars();
        // Half the draws come from coordinates with a nonzero analytic
        // gradient so the check is not dominated by trivially zero entries.
        let live: Vec<usize> = (0..total_scalars)
            .filter(|&f| {
                let (id, e) = model.params.locate(f);
                eval.grads.params[id].as_ref().is_some_and(|g| g.data[e].abs() > 1e-8)
            })
            .collect();
        assert!(!live.is_empty());
        let mut done = 0;
        while done < 6 {
            let flat = if done % 2 == 0 {
                live[r.random_range(0..live.len())]
            } else {
                r.random_range(0..total_scalars)
            };
            let (id, e) = model.params.locate(flat);
            let ana = eval.grads.params[id].as_ref().map_or(0.0, |g| g.data[e]);
            let x0 = model.params.get(id).data[e];
            let h = 1e-5;
            let mut at = |v: f64| {
                model.params.get_mut(id).data[e] = v;
                let t = compute_losses(&model, &batch, opts).unwrap().losses.total;
                model.params.get_mut(id).data[e] = x0;
                t
            };
            let (lo, mid, hi) = (at(x0 - h), at(x0), at(x0 + h));
            let (left, right) = ((mid - lo) / h, (hi - mid) / h);
            if (left - right).abs() > 1e-2 * left.abs().max(right.abs()).max(1e-3) {
                kinks += 1;
                continue;
            }
            let num = (hi - lo) / (2.0 * h);
            let name = model.params.name(id).to_string();
            assert!(rel_err_floor(ana, num, COMPOSITE_FLOOR) < MAX_REL_ERR, "instance {inst}, {name}[{e}]: {ana} vs {num}");
            done += 1;
            checked += 1;
        }
    }
    assert!(kinks * 10 < checked, "{kinks} kinks in {checked} checks");
}
