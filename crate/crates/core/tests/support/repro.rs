//! Bitwise reproducibility of training and evaluation.

use std::path::Path;

use boxseg::cli::{cmd_eval, Common};
use boxseg::config::RunConfig;
use boxseg::dataset::{load_dataset, synthesize, Split};
use boxseg::trainer::{fit, FitOptions, TrainState, LAST_CHECKPOINT, TRAIN_LOG};

/// Tiny dataset/training settings shared by the reproducibility checks.
pub fn repro_run() -> RunConfig {
    let mut run = super::tiny_run();
    run.n_train = 8;
    run.n_val = 3;
    run.train.epochs = 4;
    run.train.val_every = 1;
    run.train.batch_size = 3;
    run
}

/// Log lines without the wall-clock field, which is the only
/// non-deterministic output.
pub fn log_without_wall_time(out: &Path) -> Vec<String> {
    std::fs::read_to_string(out.join(TRAIN_LOG))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_seconds");
            v.to_string()
        })
        .collect()
}

fn train_into(run: &RunConfig, data: &Path, out: &Path, stop_after: Option<usize>, state: Option<TrainState>) {
    let ds = load_dataset(data).unwrap();
    let state = state.unwrap_or_else(|| TrainState::fresh(run).unwrap());
    let opts = FitOptions {
        out_dir: Some(out),
        stop_after,
        progress: false,
    };
    std::fs::create_dir_all(out).unwrap();
    fit(run, &ds.train, &ds.val, state, &opts).unwrap();
}

fn eval_into(data: &Path, ckpt: &Path, out: &Path) -> (String, Vec<(String, Vec<u8>)>) {
    let common = Common {
        config: None,
        seed: None,
        out: out.to_path_buf(),
        force: false,
        set: Vec::new(),
    };
    let report = cmd_eval(&common, Some(ckpt), None, data, Split::Val).unwrap();
    let mut preds: Vec<(String, Vec<u8>)> = std::fs::read_dir(out.join("predictions"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    preds.sort();
    (report.to_json(), preds)
}

/// Two independent runs with one config agree on every log line (minus wall
/// time), every checkpoint byte, and every evaluation output. Stopping and
/// resuming from the last checkpoint changes nothing either.
pub fn runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = repro_run();
    synthesize(&run, &d.join("data"), false).unwrap();
    let data = d.join("data");

    train_into(&run, &data, &d.join("a"), None, None);
    train_into(&run, &data, &d.join("b"), None, None);
    let log_a = log_without_wall_time(&d.join("a"));
    assert_eq!(log_a.len(), run.train.epochs);
    assert_eq!(log_a, log_without_wall_time(&d.join("b")));
    let ckpt = |x: &str| std::fs::read(d.join(x).join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt("a"), ckpt("b"));

    // Interrupted after two epochs, then resumed from disk.
    train_into(&run, &data, &d.join("c"), Some(2), None);
    let (state, stored) = boxseg::checkpoint::load_checkpoint(&d.join("c").join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(state.epochs_done, 2);
    train_into(&stored, &data, &d.join("c"), None, Some(state));
    assert_eq!(log_a, log_without_wall_time(&d.join("c")));
    assert_eq!(ckpt("a"), ckpt("c"));

    let ea = eval_into(&data, &d.join("a").join(LAST_CHECKPOINT), &d.join("ea"));
    let eb = eval_into(&data, &d.join("b").join(LAST_CHECKPOINT), &d.join("eb"));
    assert_eq!(ea, eb);
    assert!(!ea.1.is_empty());
}
