//! Checks shared by the focused test targets and the acceptance suite.

#![allow(dead_code)]

pub mod gradients;
pub mod oracles;
pub mod persistence;
pub mod repro;

use boxseg::config::RunConfig;

/// Small scenes and a narrow network: every pipeline stage runs in
/// milliseconds.
pub fn tiny_run() -> RunConfig {
    let mut run = RunConfig::default();
    for kv in [
        "scene.room_extent=0.6,0.6,0.3",
        "scene.object_count=1,2",
        "scene.size.box=0.1,0.16",
        "scene.size.sphere=0.1,0.16",
        "scene.size.cylinder=0.1,0.16",
        "scene.points_per_object=30,60",
        "scene.floor_wall_points=60",
        "scene.min_object_gap=0.04",
        "detector.widths=3,4,5,6",
        "refiner.base_channels=3",
    ] {
        let (k, v) = kv.split_once('=').unwrap();
        run.set(k, v).unwrap();
    }
    run
}
