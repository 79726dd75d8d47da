//! Point cloud ↔ sparse voxel grid conversion and box-based voxel selection.

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::scene::PointCloud;
use crate::tensor::Tensor;

pub type Coord = [i32; 3];

/// Occupied voxels of a cloud, sorted lexicographically, with one feature row
/// per voxel and the point → voxel index map.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    pub voxel_size: f64,
    pub coords: Vec<Coord>,
    pub features: Tensor,
    pub point_to_voxel: Vec<u32>,
}

impl SparseGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        voxel_center(self.coords[i], self.voxel_size)
    }

    /// Points of every voxel, grouped (CSR layout: `offsets[v]..offsets[v+1]`).
    pub fn voxel_points(&self) -> (Vec<u32>, Vec<u32>) {
        let mut offsets = vec![0u32; self.len() + 1];
        for &v in &self.point_to_voxel {
            offsets[v as usize + 1] += 1;
        }
        for i in 0..self.len() {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut items = vec![0u32; self.point_to_voxel.len()];
        for (p, &v) in self.point_to_voxel.iter().enumerate() {
            items[fill[v as usize] as usize] = p as u32;
            fill[v as usize] += 1;
        }
        (offsets, items)
    }
}

/// Produces the per-voxel input features.
pub trait Featurizer {
    fn channels(&self) -> usize;
    fn featurize(
        &self,
        coords: &[Coord],
        voxel_size: f64,
        points: &[[f64; 3]],
        point_to_voxel: &[u32],
    ) -> Tensor;
}

/// Default 4-channel geometric features: point count normalized by the
/// largest count in the scene, and the mean point offset from the voxel
/// center in voxel units.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeometricFeaturizer;

impl Featurizer for GeometricFeaturizer {
    fn channels(&self) -> usize {
        4
    }

    fn featurize(
        &self,
        coords: &[Coord],
        voxel_size: f64,
        points: &[[f64; 3]],
        point_to_voxel: &[u32],
    ) -> Tensor {
        let m = coords.len();
        let mut counts = vec![0usize; m];
        let mut sums = vec![[0.0f64; 3]; m];
        for (p, &v) in points.iter().zip(point_to_voxel) {
            let v = v as usize;
            counts[v] += 1;
            for a in 0..3 {
                sums[v][a] += p[a];
            }
        }
        let max_count = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let mut out = Tensor::zeros(m, 4);
        for v in 0..m {
            let c = voxel_center(coords[v], voxel_size);
            let n = counts[v] as f64;
            let row = out.row_mut(v);
            row[0] = n / max_count;
            for a in 0..3 {
                row[1 + a] = (sums[v][a] / n - c[a]) / voxel_size;
            }
        }
        out
    }
}

pub fn voxel_coord(p: [f64; 3], voxel_size: f64) -> Coord {
    p.map(|v| (v / voxel_size).floor() as i32)
}

pub fn voxel_center(coord: Coord, voxel_size: f64) -> [f64; 3] {
    coord.map(|c| (c as f64 + 0.5) * voxel_size)
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64, featurizer: &dyn Featurizer) -> Result<SparseGrid> {
    voxelize_points(&cloud.points, voxel_size, featurizer)
}

pub fn voxelize_points(points: &[[f64; 3]], voxel_size: f64, featurizer: &dyn Featurizer) -> Result<SparseGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidInput(format!("voxel_size must be positive, got {voxel_size}")));
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot voxelize an empty cloud".into()));
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput(format!("non-finite coordinate at point {i}")));
    }
    let raw: Vec<Coord> = points.iter().map(|&p| voxel_coord(p, voxel_size)).collect();
    let mut coords = raw.clone();
    coords.sort_unstable();
    coords.dedup();
    let index: FxHashMap<Coord, u32> = coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let point_to_voxel: Vec<u32> = raw.iter().map(|c| index[c]).collect();
    let features = featurizer.featurize(&coords, voxel_size, points, &point_to_voxel);
    Ok(SparseGrid {
        voxel_size,
        coords,
        features,
        point_to_voxel,
    })
}

/// Indices (ascending) of voxels whose centers lie inside `bbox`.
pub fn select_voxels(coords: &[Coord], voxel_size: f64, bbox: &Box3D) -> Vec<u32> {
    coords
        .iter()
        .enumerate()
        .filter(|(_, &c)| bbox.contains(voxel_center(c, voxel_size)))
        .map(|(i, _)| i as u32)
        .collect()
}

/// A proposal together with the voxels selected by its box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoI<P> {
    pub proposal: P,
    pub voxel_indices: Vec<u32>,
    pub features: Tensor,
}

impl<P> RoI<P> {
    pub fn len(&self) -> usize {
        self.voxel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_indices.is_empty()
    }
}

/// Something that carries a box; lets [`extract_roi`] take proposals or bare boxes.
pub trait HasBox {
    fn bbox(&self) -> &Box3D;
}

impl HasBox for Box3D {
    fn bbox(&self) -> &Box3D {
        self
    }
}

pub fn extract_roi<P: HasBox + Clone>(grid: &SparseGrid, proposal: &P) -> RoI<P> {
    let voxel_indices = select_voxels(&grid.coords, grid.voxel_size, proposal.bbox());
    let features = grid.features.gather_rows(&voxel_indices);
    RoI {
        proposal: proposal.clone(),
        voxel_indices,
        features,
    }
}

/// Broadcasts per-voxel labels to the points of each voxel.
pub fn devoxelize_mask(grid: &SparseGrid, voxel_labels: &[bool]) -> Result<Vec<bool>> {
    if voxel_labels.len() != grid.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} voxel labels, got {}",
            grid.len(),
            voxel_labels.len()
        )));
    }
    Ok(grid.point_to_voxel.iter().map(|&v| voxel_labels[v as usize]).collect())
}
