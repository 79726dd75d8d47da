//! On-disk synthetic datasets: scene/box files per split plus a manifest
//! listing every file with its SHA-256.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{sha256_hex, RunConfig};
use crate::error::{Error, Result};
use crate::scene::{boxes_path, generate_scene, read_scene_files, write_scene_files};
use crate::trainer::NamedScene;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_HEADER: &str = "BOXSEG-DATASET v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Path relative to the dataset root.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<NamedScene>,
    pub val: Vec<NamedScene>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[NamedScene] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut it| it.next().is_some())
}

/// Fails on an existing non-empty directory unless `force`; creates it otherwise.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir_is_nonempty(dir) && !force {
        return Err(Error::Data(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Generates `n_train + n_val` scenes; scene `i` (counting train first) uses
/// seed `run.seed + i`.
pub fn synthesize(run: &RunConfig, out: &Path, force: bool) -> Result<Vec<ManifestEntry>> {
    run.validate()?;
    prepare_out_dir(out, force)?;
    let mut entries = Vec::new();
    for (split, range) in [
        (Split::Train, 0..run.n_train),
        (Split::Val, run.n_train..run.n_train + run.n_val),
    ] {
        let dir = out.join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in range {
            let scene = generate_scene(&run.scene_config(run.seed.wrapping_add(i as u64)))?;
            let path = dir.join(format!("{}.scene", scene_name(i)));
            write_scene_files(&scene, &path)?;
            for p in [path.clone(), boxes_path(&path)] {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                let rel = p.strip_prefix(out).expect("inside out dir").to_string_lossy().into_owned();
                entries.push(ManifestEntry {
                    split,
                    file: rel,
                    sha256: sha256_hex(&bytes),
                });
            }
        }
    }
    let mut m = String::new();
    let _ = writeln!(m, "{MANIFEST_HEADER}");
    let _ = writeln!(m, "config_hash {}", run.hash());
    for e in &entries {
        let _ = writeln!(m, "{} {} {}", e.split.name(), e.file, e.sha256);
    }
    let mp = out.join(MANIFEST_FILE);
    std::fs::write(&mp, m).map_err(|e| Error::io(&mp, e))?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let mp = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if lines.next().map(|l| l.1) != Some(MANIFEST_HEADER) {
        return Err(Error::parse(&mp, 1, format!("expected header `{MANIFEST_HEADER}`")));
    }
    let mut entries = Vec::new();
    for (ln, l) in lines {
        if l.starts_with("config_hash ") || l.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        let [split, file, sha] = f[..] else {
            return Err(Error::parse(&mp, ln, "expected `split file sha256`"));
        };
        let split = Split::parse(split).ok_or_else(|| Error::parse(&mp, ln, format!("unknown split `{split}`")))?;
        entries.push(ManifestEntry {
            split,
            file: file.to_string(),
            sha256: sha.to_string(),
        });
    }
    Ok(entries)
}

/// Loads every scene listed in the manifest, verifying hashes. All absent
/// files are reported together.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let entries = read_manifest(root)?;
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !root.join(&e.file).is_file())
        .map(|e| e.file.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing dataset files: {}", missing.join(", "))));
    }
    for e in &entries {
        let p = root.join(&e.file);
        let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Data(format!("{} does not match its manifest hash", e.file)));
        }
    }
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
    };
    for e in entries.iter().filter(|e| e.file.ends_with(".scene")) {
        let p: PathBuf = root.join(&e.file);
        let scene = read_scene_files(&p)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let named = NamedScene { name, scene };
        match e.split {
            Split::Train => ds.train.push(named),
            Split::Val => ds.val.push(named),
        }
    }
    Ok(ds)
}

/// Generates the dataset of `run` in memory, identical to what
/// [`synthesize`] writes.
pub fn generate_in_memory(run: &RunConfig) -> Result<Dataset> {
    run.validate()?;
    let make = |i: usize| -> Result<NamedScene> {
        Ok(NamedScene {
            name: scene_name(i),
            scene: generate_scene(&run.scene_config(run.seed.wrapping_add(i as u64)))?,
        })
    };
    Ok(Dataset {
        train: (0..run.n_train).map(make).collect::<Result<_>>()?,
        val: (run.n_train..run.n_train + run.n_val).map(make).collect::<Result<_>>()?,
    })
}
