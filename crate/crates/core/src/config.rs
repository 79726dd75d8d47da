//! Flat `key = value` run configuration covering every tunable default.
//!
//! The canonical form is the sorted list of `key=value` lines rendered from
//! typed values; its SHA-256 is the config hash, so the hash is independent
//! of key order and formatting in the source file.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::detector::{DetectorConfig, NmsConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::refiner::{LabelRule, RefinerConfig};
use crate::scene::{SceneConfig, ShapeKind, ShapeSpec};
use crate::trainer::TrainConfig;

const KINDS: [ShapeKind; 3] = [ShapeKind::Box, ShapeKind::Sphere, ShapeKind::Cylinder];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Drives scene synthesis in `synth` and initialization/shuffling in `train`.
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub room_extent: [f64; 3],
    pub object_count: (usize, usize),
    /// Class `i` is `shapes[i]`.
    pub shapes: Vec<ShapeKind>,
    /// Size range of each kind, indexed like `KINDS`.
    pub shape_sizes: [(f64, f64); 3],
    pub points_per_object: (usize, usize),
    pub floor_wall_points: usize,
    pub min_object_gap: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_mask_size: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let mut shape_sizes = [(0.0, 0.0); 3];
        for s in &scene.shape_catalog {
            shape_sizes[kind_index(s.kind)] = s.size_range;
        }
        RunConfig {
            seed: 1,
            n_train: 200,
            n_val: 40,
            room_extent: scene.room_extent,
            object_count: scene.object_count_range,
            shapes: scene.shape_catalog.iter().map(|s| s.kind).collect(),
            shape_sizes,
            points_per_object: scene.points_per_object_range,
            floor_wall_points: scene.floor_wall_point_count,
            min_object_gap: scene.min_object_gap,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_mask_size: 1,
            bench_repeats: 5,
        }
    }
}

fn kind_index(k: ShapeKind) -> usize {
    KINDS.iter().position(|&x| x == k).expect("all kinds listed")
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(key, value, &format!("expected {}", std::any::type_name::<T>())))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|t| parse_one(key, t)).collect()
}

fn parse_pair<T: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<(T, T)> {
    match parse_list::<T>(key, value)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(bad(key, value, "expected two comma-separated values")),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

impl RunConfig {
    pub fn num_classes(&self) -> usize {
        self.shapes.len()
    }

    /// Scene generator settings for the scene with the given seed.
    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            room_extent: self.room_extent,
            object_count_range: self.object_count,
            shape_catalog: self
                .shapes
                .iter()
                .map(|&kind| ShapeSpec {
                    kind,
                    size_range: self.shape_sizes[kind_index(kind)],
                })
                .collect(),
            points_per_object_range: self.points_per_object,
            floor_wall_point_count: self.floor_wall_points,
            min_object_gap: self.min_object_gap,
            seed,
        }
    }

    /// Canonical `key → value` rendering.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let d = &self.model.detector;
        let r = &self.model.refiner;
        let t = &self.train;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("data.n_train", self.n_train.to_string());
        put("data.n_val", self.n_val.to_string());
        put("scene.room_extent", join(&self.room_extent));
        put("scene.object_count", format!("{},{}", self.object_count.0, self.object_count.1));
        put("scene.shapes", self.shapes.iter().map(|k| k.name()).collect::<Vec<_>>().join(","));
        for k in KINDS {
            let (a, b) = self.shape_sizes[kind_index(k)];
            put(&format!("scene.size.{}", k.name()), format!("{a},{b}"));
        }
        put(
            "scene.points_per_object",
            format!("{},{}", self.points_per_object.0, self.points_per_object.1),
        );
        put("scene.floor_wall_points", self.floor_wall_points.to_string());
        put("scene.min_object_gap", self.min_object_gap.to_string());
        put("voxel_size", d.voxel_size.to_string());
        put("detector.widths", join(&d.widths));
        put("detector.head_levels", join(&d.head_levels));
        put("detector.k_max", d.k_max.to_string());
        put("detector.focal_alpha", d.focal_alpha.to_string());
        put("detector.focal_gamma", d.focal_gamma.to_string());
        put("nms.score_threshold", d.nms.score_threshold.to_string());
        put("nms.iou", d.nms.nms_iou.to_string());
        put("nms.max_proposals", d.nms.max_proposals.to_string());
        put("refiner.levels", r.levels.to_string());
        put("refiner.base_channels", r.base_channels.to_string());
        put("refiner.iou_match_threshold", r.iou_match_threshold.to_string());
        put("refiner.label_rule", r.label_rule.name().to_string());
        put("refiner.fg_threshold", r.fg_threshold.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", t.lr.to_string());
        put(
            "train.lr_drops",
            match t.lr_drops {
                Some((a, b)) => format!("{a},{b}"),
                None => "auto".into(),
            },
        );
        put("train.lr_drop_factor", t.lr_drop_factor.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.clip_norm", t.clip_norm.to_string());
        put("train.gt_warmup", t.gt_warmup.to_string());
        put("train.gt_warmup_fraction", t.gt_warmup_fraction.to_string());
        put("train.augment", t.augment.to_string());
        put("train.val_every", t.val_every.to_string());
        put("eval.min_mask_size", self.min_mask_size.to_string());
        put("bench.repeats", self.bench_repeats.to_string());
        m
    }

    pub fn keys() -> Vec<String> {
        RunConfig::default().to_pairs().into_keys().collect()
    }

    /// Sets one key from its textual value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.model.detector;
        let r = &mut self.model.refiner;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_one(key, v)?,
            "data.n_train" => self.n_train = parse_one(key, v)?,
            "data.n_val" => self.n_val = parse_one(key, v)?,
            "scene.room_extent" => {
                self.room_extent = parse_list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| bad(key, v, "expected three values"))?
            }
            "scene.object_count" => self.object_count = parse_pair(key, v)?,
            "scene.shapes" => {
                let kinds = v
                    .split(',')
                    .map(|s| ShapeKind::parse(s.trim()).ok_or_else(|| bad(key, v, "unknown shape kind")))
                    .collect::<Result<Vec<_>>>()?;
                self.shapes = kinds;
            }
            "scene.points_per_object" => self.points_per_object = parse_pair(key, v)?,
            "scene.floor_wall_points" => self.floor_wall_points = parse_one(key, v)?,
            "scene.min_object_gap" => self.min_object_gap = parse_one(key, v)?,
            "voxel_size" => d.voxel_size = parse_one(key, v)?,
            "detector.widths" => d.widths = parse_list(key, v)?,
            "detector.head_levels" => d.head_levels = parse_list(key, v)?,
            "detector.k_max" => d.k_max = parse_one(key, v)?,
            "detector.focal_alpha" => d.focal_alpha = parse_one(key, v)?,
            "detector.focal_gamma" => d.focal_gamma = parse_one(key, v)?,
            "nms.score_threshold" => d.nms.score_threshold = parse_one(key, v)?,
            "nms.iou" => d.nms.nms_iou = parse_one(key, v)?,
            "nms.max_proposals" => d.nms.max_proposals = parse_one(key, v)?,
            "refiner.levels" => r.levels = parse_one(key, v)?,
            "refiner.base_channels" => r.base_channels = parse_one(key, v)?,
            "refiner.iou_match_threshold" => r.iou_match_threshold = parse_one(key, v)?,
            "refiner.label_rule" => {
                r.label_rule = LabelRule::parse(v).ok_or_else(|| bad(key, v, "expected any or majority"))?
            }
            "refiner.fg_threshold" => r.fg_threshold = parse_one(key, v)?,
            "train.epochs" => t.epochs = parse_one(key, v)?,
            "train.batch_size" => t.batch_size = parse_one(key, v)?,
            "train.lr" => t.lr = parse_one(key, v)?,
            "train.lr_drops" => t.lr_drops = if v == "auto" { None } else { Some(parse_pair(key, v)?) },
            "train.lr_drop_factor" => t.lr_drop_factor = parse_one(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_one(key, v)?,
            "train.clip_norm" => t.clip_norm = parse_one(key, v)?,
            "train.gt_warmup" => t.gt_warmup = parse_bool(key, v)?,
            "train.gt_warmup_fraction" => t.gt_warmup_fraction = parse_one(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.val_every" => t.val_every = parse_one(key, v)?,
            "eval.min_mask_size" => self.min_mask_size = parse_one(key, v)?,
            "bench.repeats" => self.bench_repeats = parse_one(key, v)?,
            _ => match key.strip_prefix("scene.size.").and_then(ShapeKind::parse) {
                Some(kind) => self.shape_sizes[kind_index(kind)] = parse_pair(key, v)?,
                None => return Err(Error::Config(format!("unknown config key `{key}`"))),
            },
        }
        self.normalize();
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                return Err(Error::Config(format!(
                    "{}:{}: `{k}` already set on line {prev}",
                    path.display(),
                    i + 1
                )));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {}", path.display(), i + 1, strip_config(e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn canonical_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config(self.seed).validate()?;
        if self.model.detector.num_classes != self.num_classes() {
            return Err(Error::Config("detector class count disagrees with scene.shapes".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.n_train == 0 {
            return Err(Error::Config("data.n_train must be positive".into()));
        }
        Ok(())
    }

    /// Keeps dependent fields consistent after edits.
    pub fn normalize(&mut self) {
        self.model.detector.num_classes = self.num_classes();
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl RunConfig {
    pub fn with_nms(&self, nms: NmsConfig) -> RunConfig {
        let mut c = self.clone();
        c.model.detector.nms = nms;
        c
    }

    pub fn with_refiner(&self, refiner: RefinerConfig) -> RunConfig {
        let mut c = self.clone();
        c.model.refiner = refiner;
        c
    }

    pub fn detector(&self) -> &DetectorConfig {
        &self.model.detector
    }
}
