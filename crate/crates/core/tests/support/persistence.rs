//! File round trips and rejection of damaged inputs.

use std::path::Path;

use boxseg::checkpoint::{blob_path, load_checkpoint, load_checkpoint_as, save_checkpoint};
use boxseg::config::RunConfig;
use boxseg::dataset::{load_dataset, synthesize};
use boxseg::error::Error;
use boxseg::refiner::{read_predictions, write_predictions, InstanceMask};
use boxseg::scene::{boxes_path, boxes_to_string, generate_scene, read_scene, read_scene_files, write_scene_files};
use boxseg::trainer::{fit, FitOptions, TrainState};

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// A trained state (nonzero Adam moments) survives save → load bit for bit,
/// and saving it again writes identical bytes.
pub fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = super::tiny_run();
    run.n_train = 4;
    run.n_val = 2;
    run.train.epochs = 1;
    let ds = boxseg::dataset::generate_in_memory(&run).unwrap();
    let opts = FitOptions {
        out_dir: None,
        stop_after: None,
        progress: false,
    };
    let st = fit(&run, &ds.train, &ds.val, TrainState::fresh(&run).unwrap(), &opts).unwrap().state;
    assert!(st.adam.step > 0);

    let p = dir.path().join("a.ckpt");
    save_checkpoint(&st, &run, &p).unwrap();
    let (back, run_back) = load_checkpoint(&p).unwrap();
    assert_eq!(run_back.hash(), run.hash());
    assert_eq!(back.epochs_done, st.epochs_done);
    assert_eq!(back.best_val_ap.map(f64::to_bits), st.best_val_ap.map(f64::to_bits));
    assert_eq!(back.adam.step, st.adam.step);
    for ((name, a), (_, b)) in st.model.params.iter().zip(back.model.params.iter()) {
        assert_eq!(bits(&a.data), bits(&b.data), "{name}");
    }
    for (a, b) in st.adam.m.iter().zip(&back.adam.m).chain(st.adam.v.iter().zip(&back.adam.v)) {
        assert_eq!(bits(&a.data), bits(&b.data));
    }

    let q = dir.path().join("b.ckpt");
    save_checkpoint(&back, &run_back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert_eq!(std::fs::read(blob_path(&p)).unwrap(), std::fs::read(blob_path(&q)).unwrap());
}

/// Scene and box files read back to the identical scene, and rewriting
/// reproduces the same bytes.
pub fn scene_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::default();
    for seed in 0..5 {
        let scene = generate_scene(&run.scene_config(seed)).unwrap();
        let p = dir.path().join(format!("s{seed}.scene"));
        write_scene_files(&scene, &p).unwrap();
        let back = read_scene_files(&p).unwrap();
        assert_eq!(back, scene);
        let q = dir.path().join(format!("t{seed}.scene"));
        write_scene_files(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(std::fs::read(boxes_path(&p)).unwrap(), std::fs::read(boxes_path(&q)).unwrap());
    }
}

fn expect_parse(r: Result<impl std::fmt::Debug, Error>, line: usize, what: &str) {
    match r {
        Err(Error::Parse { line: l, .. }) if l == line => {}
        other => panic!("{what}: expected parse error on line {line}, got {other:?}"),
    }
}

/// Damaged scene, box, prediction, dataset, checkpoint and config inputs
/// each fail with their error class (and line, where there is one).
pub fn corrupted_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = generate_scene(&RunConfig::default().scene_config(3)).unwrap();
    let good = d.join("good.scene");
    write_scene_files(&scene, &good).unwrap();
    let text = std::fs::read_to_string(&good).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let write = |name: &str, body: String| {
        let p = d.join(name);
        std::fs::write(&p, body).unwrap();
        p
    };

    let bad_header = write("h.scene", text.replacen("TD3D-SCENE v1", "TD3D-SCENE v9", 1));
    expect_parse(read_scene(&bad_header), 1, "header");

    let truncated = write("t.scene", lines[..lines.len() - 2].join("\n"));
    expect_parse(read_scene(&truncated), lines.len() - 1, "truncated");

    let mut nan = lines.clone();
    let fields: Vec<&str> = nan[5].split_whitespace().collect();
    let nan_line = format!("NaN {} {} {} {}", fields[1], fields[2], fields[3], fields[4]);
    nan[5] = &nan_line;
    expect_parse(read_scene(&write("n.scene", nan.join("\n"))), 6, "NaN coordinate");

    // Instance ids must stay contiguous: relabel every point of the last
    // instance to a gap id.
    let k = scene.boxes.len() as i32;
    let gap: Vec<String> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if i >= 2 && f[4] == (k - 1).to_string() {
                format!("{} {} {} {} {}", f[0], f[1], f[2], f[3], k + 1)
            } else {
                l.to_string()
            }
        })
        .collect();
    assert!(matches!(read_scene(&write("g.scene", gap.join("\n"))), Err(Error::Parse { .. })));

    // A sidecar that disagrees with the labels.
    let moved = d.join("moved.scene");
    write_scene_files(&scene, &moved).unwrap();
    let mut boxes = scene.boxes.clone();
    boxes[0].bbox.center[0] += 0.01;
    std::fs::write(boxes_path(&moved), boxes_to_string(&boxes)).unwrap();
    assert!(matches!(read_scene_files(&moved), Err(Error::Data(_))));

    // Predictions indexing past the end of the scene.
    let pred = d.join("p.pred");
    let masks = vec![InstanceMask {
        point_mask: vec![true; 10],
        class_id: 1,
        score: 0.5,
    }];
    write_predictions(&masks, &pred).unwrap();
    assert!(matches!(read_predictions(&pred, 9), Err(Error::Parse { .. })));
    assert_eq!(read_predictions(&pred, 10).unwrap(), masks);

    dataset_damage(d);
    checkpoint_damage(d);

    let mut run = RunConfig::default();
    let cfg = write("c.txt", "seed = 4\nno.such.key = 1\n".into());
    match run.apply_text(&std::fs::read_to_string(&cfg).unwrap(), &cfg) {
        Err(e @ Error::Config(_)) => {
            assert!(e.to_string().contains("c.txt:2"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("unknown key: {other:?}"),
    }
    assert!(matches!(run.apply_text("seed = 1\nseed = 2\n", Path::new("dup")), Err(Error::Config(_))));
}

fn dataset_damage(d: &Path) {
    let mut run = RunConfig::default();
    run.n_train = 2;
    run.n_val = 1;
    let root = d.join("ds");
    synthesize(&run, &root, false).unwrap();
    assert!(matches!(synthesize(&run, &root, false), Err(Error::Data(_))), "non-empty out dir");
    assert_eq!(load_dataset(&root).unwrap().train.len(), 2);

    let victim = root.join("train/scene_0001.scene");
    let mut bytes = std::fs::read(&victim).unwrap();
    let at = bytes.len() - 3;
    bytes[at] = if bytes[at] == b'1' { b'2' } else { b'1' };
    std::fs::write(&victim, &bytes).unwrap();
    assert!(matches!(load_dataset(&root), Err(Error::Data(_))), "hash mismatch");

    std::fs::remove_file(&victim).unwrap();
    std::fs::remove_file(root.join("val/scene_0002.boxes")).unwrap();
    match load_dataset(&root) {
        Err(Error::Data(msg)) => {
            assert!(msg.contains("train/scene_0001.scene") && msg.contains("val/scene_0002.boxes"), "{msg}");
        }
        other => panic!("missing files: {:?}", other.map(|_| ())),
    }
}

fn checkpoint_damage(d: &Path) {
    let run = super::tiny_run();
    let st = TrainState::fresh(&run).unwrap();
    let p = d.join("x.ckpt");
    save_checkpoint(&st, &run, &p).unwrap();

    let mut wide = run.clone();
    wide.set("detector.widths", "3,4,7,6").unwrap();
    match load_checkpoint_as(&p, &wide) {
        Err(e @ Error::CheckpointMismatch { .. }) => {
            assert!(e.to_string().contains("detector.down2.w"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("shape mismatch: {:?}", other.map(|r| r.1)),
    }

    let bp = blob_path(&p);
    let mut bytes = std::fs::read(&bp).unwrap();
    bytes[17] ^= 0x10;
    std::fs::write(&bp, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Parse { .. })), "flipped blob bit");
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&bp, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Parse { .. })), "short blob");

    let manifest = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, manifest.replacen("BOXSEG-CHECKPOINT v1", "BOXSEG-CHECKPOINT v0", 1)).unwrap();
    expect_parse(load_checkpoint(&p).map(|_| ()), 1, "checkpoint header");
}
