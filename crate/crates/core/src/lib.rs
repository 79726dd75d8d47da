//! Top-down 3D instance segmentation on sparse voxel grids.
//!
//! Pipeline: voxelize a point cloud, detect axis-aligned box proposals with a
//! fully-convolutional sparse detector, gather the voxels inside each box,
//! and classify them foreground/background with a tiny sparse U-Net. Masks
//! are broadcast back to points and scored with ScanNet-style AP.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refiner;
pub mod scene;
pub mod sparse;
pub mod tensor;
pub mod trainer;
pub mod voxel;

pub use error::{Error, Result};
