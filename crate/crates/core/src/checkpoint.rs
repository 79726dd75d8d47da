//! Checkpoints: a plain-text manifest plus a little-endian f64 blob.
//!
//! The manifest names the blob's size and SHA-256, the full run config and
//! its hash, and every parameter with its shape. The blob holds parameter
//! values followed by the optimizer's first and second moments, all in
//! manifest order. Loading validates everything before building any state.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{sha256_hex, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Adam;
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const CHECKPOINT_HEADER: &str = "BOXSEG-CHECKPOINT v1";

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(state: &TrainState, run: &RunConfig, path: &Path) -> Result<()> {
    let params = &state.model.params;
    let mut blob = Vec::with_capacity(3 * params.num_scalars() * 8);
    let tensors = params
        .iter()
        .map(|(_, t)| t)
        .chain(&state.adam.m)
        .chain(&state.adam.v);
    for t in tensors {
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_file = blob_path(path);
    let mut m = String::new();
    let _ = writeln!(m, "{CHECKPOINT_HEADER}");
    let _ = writeln!(m, "config_hash {}", run.hash());
    let _ = writeln!(m, "blob_sha256 {}", sha256_hex(&blob));
    let _ = writeln!(m, "blob_bytes {}", blob.len());
    let _ = writeln!(m, "epochs_done {}", state.epochs_done);
    let _ = writeln!(m, "adam_step {}", state.adam.step);
    match state.best_val_ap {
        Some(v) => {
            let _ = writeln!(m, "best_val_ap {v:e}");
        }
        None => {
            let _ = writeln!(m, "best_val_ap none");
        }
    }
    for (k, v) in run.to_pairs() {
        let _ = writeln!(m, "config {k} = {v}");
    }
    for (name, t) in params.iter() {
        let _ = writeln!(m, "param {name} {} {}", t.rows, t.cols);
    }
    write_atomic(&blob_file, &blob)?;
    write_atomic(path, m.as_bytes())
}

struct Manifest {
    config_hash: String,
    blob_sha256: String,
    blob_bytes: usize,
    epochs_done: usize,
    adam_step: u64,
    best_val_ap: Option<f64>,
    run: RunConfig,
    params: Vec<(String, usize, usize, usize)>,
}

fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, CHECKPOINT_HEADER)) => {}
        _ => return Err(Error::parse(path, 1, format!("expected header `{CHECKPOINT_HEADER}`"))),
    }
    let mut field = |name: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((ln, l)) => match l.strip_prefix(name).and_then(|r| r.strip_prefix(' ')) {
                Some(v) => Ok((ln, v.to_string())),
                None => Err(Error::parse(path, ln, format!("expected `{name}`"))),
            },
            None => Err(Error::parse(path, 0, format!("truncated before `{name}`"))),
        }
    };
    fn num<T: std::str::FromStr>(path: &Path, (ln, v): (usize, String)) -> Result<T> {
        v.parse().map_err(|_| Error::parse(path, ln, format!("bad number `{v}`")))
    }
    let config_hash = field("config_hash")?.1;
    let blob_sha256 = field("blob_sha256")?.1;
    let blob_bytes = num(path, field("blob_bytes")?)?;
    let epochs_done = num(path, field("epochs_done")?)?;
    let adam_step = num(path, field("adam_step")?)?;
    let best = field("best_val_ap")?;
    let best_val_ap = if best.1 == "none" { None } else { Some(num(path, best)?) };

    let mut run = RunConfig::default();
    let mut seen = 0usize;
    let mut params = Vec::new();
    let mut offset = 0usize;
    for (ln, l) in lines {
        if let Some(kv) = l.strip_prefix("config ") {
            if !params.is_empty() {
                return Err(Error::parse(path, ln, "config entry after parameters"));
            }
            let (k, v) = kv
                .split_once(" = ")
                .ok_or_else(|| Error::parse(path, ln, "expected `config key = value`"))?;
            run.set(k, v).map_err(|e| Error::parse(path, ln, e.to_string()))?;
            seen += 1;
        } else if let Some(p) = l.strip_prefix("param ") {
            let f: Vec<&str> = p.split(' ').collect();
            let [name, rows, cols] = f[..] else {
                return Err(Error::parse(path, ln, "expected `param name rows cols`"));
            };
            let rows: usize = num(path, (ln, rows.to_string()))?;
            let cols: usize = num(path, (ln, cols.to_string()))?;
            params.push((name.to_string(), rows, cols, offset));
            offset += rows * cols;
        } else {
            return Err(Error::parse(path, ln, format!("unexpected line `{l}`")));
        }
    }
    if seen != RunConfig::keys().len() {
        return Err(Error::parse(
            path,
            0,
            format!("manifest has {seen} config entries, expected {}", RunConfig::keys().len()),
        ));
    }
    if run.hash() != config_hash {
        return Err(Error::parse(path, 2, "config hash does not match the listed config"));
    }
    if blob_bytes != 3 * offset * 8 {
        return Err(Error::parse(path, 4, "blob size disagrees with parameter shapes"));
    }
    Ok(Manifest {
        config_hash,
        blob_sha256,
        blob_bytes,
        epochs_done,
        adam_step,
        best_val_ap,
        run,
        params,
    })
}

fn read_blob(path: &Path, m: &Manifest) -> Result<Vec<f64>> {
    let bp = blob_path(path);
    let bytes = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() != m.blob_bytes {
        return Err(Error::parse(&bp, 0, format!("blob has {} bytes, manifest says {}", bytes.len(), m.blob_bytes)));
    }
    if sha256_hex(&bytes) != m.blob_sha256 {
        return Err(Error::parse(&bp, 0, "blob checksum mismatch"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Fills a model built from `run` with the manifest's tensors.
fn restore(m: &Manifest, values: &[f64], run: &RunConfig) -> Result<TrainState> {
    let mut model = Model::new(run.model.clone(), run.seed)?;
    if model.params.len() != m.params.len() {
        let entry = model
            .params
            .iter()
            .zip(&m.params)
            .find(|((n, _), (mn, ..))| n != mn)
            .map(|((n, _), _)| n.to_string())
            .or_else(|| m.params.get(model.params.len()).map(|p| p.0.clone()))
            .or_else(|| model.params.iter().nth(m.params.len()).map(|(n, _)| n.to_string()))
            .unwrap_or_default();
        return Err(Error::CheckpointMismatch {
            entry,
            msg: format!("checkpoint has {} parameters, model has {}", m.params.len(), model.params.len()),
        });
    }
    for (id, (name, rows, cols, _)) in m.params.iter().enumerate() {
        let t = model.params.get(id);
        if model.params.name(id) != name || (t.rows, t.cols) != (*rows, *cols) {
            return Err(Error::CheckpointMismatch {
                entry: name.clone(),
                msg: format!(
                    "checkpoint has {name} {rows}x{cols}, model expects {} {}x{}",
                    model.params.name(id),
                    t.rows,
                    t.cols
                ),
            });
        }
    }
    let n = values.len() / 3;
    let section = |s: usize, (_, rows, cols, off): &(String, usize, usize, usize)| {
        Tensor::from_vec(*rows, *cols, values[s * n + off..s * n + off + rows * cols].to_vec())
    };
    for (id, p) in m.params.iter().enumerate() {
        *model.params.get_mut(id) = section(0, p);
    }
    let mut adam = Adam::new(&model.params, run.train.weight_decay);
    adam.step = m.adam_step;
    adam.m = m.params.iter().map(|p| section(1, p)).collect();
    adam.v = m.params.iter().map(|p| section(2, p)).collect();
    Ok(TrainState {
        model,
        adam,
        epochs_done: m.epochs_done,
        best_val_ap: m.best_val_ap,
    })
}

/// Loads a checkpoint with the config stored inside it.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = parse_manifest(&text, path)?;
    let values = read_blob(path, &m)?;
    let state = restore(&m, &values, &m.run)?;
    Ok((state, m.run))
}

/// Loads a checkpoint into a model built from `expected`. Parameter names
/// and shapes must agree; the returned flag tells whether the config hashes
/// also agree.
pub fn load_checkpoint_as(path: &Path, expected: &RunConfig) -> Result<(TrainState, bool)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = parse_manifest(&text, path)?;
    let values = read_blob(path, &m)?;
    let state = restore(&m, &values, expected)?;
    Ok((state, m.config_hash == expected.hash()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.set("detector.widths", "4,4,4,4").unwrap();
        c.set("refiner.base_channels", "2").unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny();
        let mut st = TrainState::fresh(&run).unwrap();
        st.adam.step = 7;
        st.adam.m[0].data[0] = 0.25;
        st.best_val_ap = Some(0.123);
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&st, &run, &p).unwrap();
        let (back, run2) = load_checkpoint(&p).unwrap();
        assert_eq!(run2, run);
        assert_eq!(back.model.params, st.model.params);
        assert_eq!(back.adam, st.adam);
        assert_eq!(back.best_val_ap, Some(0.123));
    }

    #[test]
    fn mismatched_config_names_entry() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny();
        let st = TrainState::fresh(&run).unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&st, &run, &p).unwrap();
        let mut other = run.clone();
        other.set("detector.widths", "4,4,8,4").unwrap();
        match load_checkpoint_as(&p, &other) {
            Err(Error::CheckpointMismatch { entry, .. }) => assert_eq!(entry, "detector.down2.w"),
            other => panic!("unexpected {:?}", other.map(|r| r.1)),
        }
        let mut nms = run.clone();
        nms.set("nms.iou", "0.5").unwrap();
        let (_, same_hash) = load_checkpoint_as(&p, &nms).unwrap();
        assert!(!same_hash);
    }

    #[test]
    fn corrupted_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny();
        let st = TrainState::fresh(&run).unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&st, &run, &p).unwrap();
        let bp = blob_path(&p);
        let mut bytes = std::fs::read(&bp).unwrap();
        bytes[100] ^= 1;
        std::fs::write(&bp, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Parse { .. })));
    }
}
