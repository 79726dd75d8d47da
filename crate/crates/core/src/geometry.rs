//! Axis-aligned boxes and their volumetric IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used by every "center inside box" test, in meters.
pub const CONTAINMENT_TOL: f64 = 1e-9;

/// Axis-aligned 3D box given by center and full edge lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        let b = Box3D { center, size };
        b.validate()?;
        Ok(b)
    }

    pub fn from_min_max(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let center = std::array::from_fn(|i| 0.5 * (min[i] + max[i]));
        let size = std::array::from_fn(|i| max[i] - min[i]);
        Box3D::new(center, size)
    }

    /// Tight bound of a non-empty point set. Fails when the set is flat along
    /// some axis, since boxes must have strictly positive size.
    pub fn bounding(points: impl IntoIterator<Item = [f64; 3]>) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        Box3D::from_min_max(lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.center.iter().chain(&self.size).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite box {self:?}")));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidInput(format!("box size must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - 0.5 * self.size[i])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + 0.5 * self.size[i])
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Inclusive containment on both faces, with [`CONTAINMENT_TOL`] slack.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= 0.5 * self.size[i] + CONTAINMENT_TOL)
    }

    /// Separation between two boxes along the most separating axis (0 when
    /// they touch or overlap).
    pub fn gap(&self, other: &Box3D) -> f64 {
        let (amin, amax, bmin, bmax) = (self.min(), self.max(), other.min(), other.max());
        (0..3)
            .map(|i| (bmin[i] - amax[i]).max(amin[i] - bmax[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Box3D {
        Box3D {
            center: self.center.map(|c| c * factor),
            size: self.size.map(|s| s * factor),
        }
    }
}

fn overlaps(a: &Box3D, b: &Box3D) -> [f64; 3] {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    std::array::from_fn(|i| (amax[i].min(bmax[i]) - amin[i].max(bmin[i])).max(0.0))
}

/// Volume intersection-over-union of two axis-aligned boxes.
pub fn box_iou(a: &Box3D, b: &Box3D) -> f64 {
    let o = overlaps(a, b);
    let inter = o[0] * o[1] * o[2];
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.volume() + b.volume() - inter)
}

/// IoU together with its partial derivatives with respect to the first box's
/// center and size. The gradient is zero when the boxes do not overlap.
pub fn box_iou_grad(pred: &Box3D, gt: &Box3D) -> (f64, [f64; 3], [f64; 3]) {
    let (pmin, pmax, gmin, gmax) = (pred.min(), pred.max(), gt.min(), gt.max());
    let o = overlaps(pred, gt);
    let inter = o[0] * o[1] * o[2];
    if inter <= 0.0 {
        return (0.0, [0.0; 3], [0.0; 3]);
    }
    let vp = pred.volume();
    let union = vp + gt.volume() - inter;
    let iou = inter / union;
    // d iou / d inter and d iou / d vp
    let d_inter = (vp + gt.volume()) / (union * union);
    let d_vp = -inter / (union * union);

    let mut d_center = [0.0; 3];
    let mut d_size = [0.0; 3];
    for i in 0..3 {
        let others = o[(i + 1) % 3] * o[(i + 2) % 3];
        // overlap_i = min(pmax, gmax) - max(pmin, gmin)
        let d_hi = if pmax[i] < gmax[i] { 1.0 } else { 0.0 };
        let d_lo = if pmin[i] > gmin[i] { -1.0 } else { 0.0 };
        let d_o_center = d_hi + d_lo;
        let d_o_size = 0.5 * d_hi - 0.5 * d_lo;
        d_center[i] = d_inter * others * d_o_center;
        let d_vp_size = vp / pred.size[i];
        d_size[i] = d_inter * others * d_o_size + d_vp * d_vp_size;
    }
    (iou, d_center, d_size)
}
