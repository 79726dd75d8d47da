//! Command-line commands: `synth`, `train`, `eval`, `ablate`, `bench`.
//!
//! Every command resolves its configuration (defaults, then a checkpoint's
//! stored config where one is given, then `--config`, `--seed` and `--set`),
//! prints the resolved config hash to stderr, and writes only below `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation;
use crate::checkpoint::{load_checkpoint, load_checkpoint_as};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, prepare_out_dir, synthesize, Dataset, Split};
use crate::detector::Proposal;
use crate::error::{Error, Result};
use crate::metrics::{benchmark, evaluate, EvalOptions, MetricsReport, RuntimeStats, SceneGt};
use crate::model::Model;
use crate::refiner::{write_predictions, InstanceMask};
use crate::trainer::{fit, FitOptions, NamedScene, TrainState, LAST_CHECKPOINT};

#[derive(Debug, Parser)]
#[command(name = "boxseg", version, about = "Top-down 3D instance segmentation on synthetic desk scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Config override `key=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Oracle {
    /// Ground-truth instance masks as predictions.
    GtMasks,
    /// Ground-truth boxes as proposals for the refiner.
    GtBoxes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    UnetLevels,
    ProposalCap,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a train/val dataset of synthetic scenes.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
    },
    /// Train detector and refiner jointly.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint (or an oracle) on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        oracle: Option<Oracle>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Sweep U-Net depth or proposal count.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; defaults to 0,1,2,3,4 or 20,60,100,140.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Time end-to-end inference per scene.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
}

/// Applies `--config`, `--seed` and `--set` on top of `base`.
pub fn resolve_config(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text, p)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.apply_overrides(&common.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn announce(cfg: &RunConfig) {
    eprintln!("config_hash {}", cfg.hash());
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint with the command's overrides applied to its config;
/// warns on a config hash mismatch.
fn load_model(common: &Common, checkpoint: &Path) -> Result<(Model, RunConfig)> {
    let (_, stored) = load_checkpoint(checkpoint)?;
    let cfg = resolve_config(common, stored)?;
    let (state, same) = load_checkpoint_as(checkpoint, &cfg)?;
    if !same {
        eprintln!("warning: config hash differs from the checkpoint's");
    }
    Ok((state.model, cfg))
}

pub fn cmd_synth(common: &Common, n_train: Option<usize>, n_val: Option<usize>) -> Result<usize> {
    let mut cfg = resolve_config(common, RunConfig::default())?;
    cfg.n_train = n_train.unwrap_or(cfg.n_train);
    cfg.n_val = n_val.unwrap_or(cfg.n_val);
    announce(&cfg);
    let entries = synthesize(&cfg, &common.out, common.force)?;
    write_file(&common.out.join("config.txt"), &cfg.canonical_text())?;
    Ok(entries.len() / 2)
}

pub fn cmd_train(common: &Common, data: &Path, resume: bool) -> Result<TrainState> {
    let last = common.out.join(LAST_CHECKPOINT);
    let (state, cfg) = if resume {
        let (_, stored) = load_checkpoint(&last)?;
        let cfg = resolve_config(common, stored)?;
        let (state, same) = load_checkpoint_as(&last, &cfg)?;
        if !same {
            return Err(Error::Config("resume requires the checkpoint's config unchanged".into()));
        }
        (state, cfg)
    } else {
        let cfg = resolve_config(common, RunConfig::default())?;
        prepare_out_dir(&common.out, common.force)?;
        (TrainState::fresh(&cfg)?, cfg)
    };
    announce(&cfg);
    let ds = load_dataset(data)?;
    write_file(&common.out.join("config.txt"), &cfg.canonical_text())?;
    let opts = FitOptions {
        out_dir: Some(&common.out),
        stop_after: None,
        progress: true,
    };
    Ok(fit(&cfg, &ds.train, &ds.val, state, &opts)?.state)
}

fn gt_masks(s: &NamedScene) -> Vec<InstanceMask> {
    let gt = SceneGt::from_cloud(&s.scene.cloud);
    gt.instances
        .iter()
        .map(|g| {
            let mut point_mask = vec![false; gt.num_points];
            for &i in &g.points {
                point_mask[i as usize] = true;
            }
            InstanceMask {
                point_mask,
                class_id: g.class_id,
                score: 1.0,
            }
        })
        .collect()
}

/// Ground-truth boxes as unit-score proposals.
pub fn gt_proposals(s: &NamedScene) -> Vec<Proposal> {
    s.scene
        .boxes
        .iter()
        .map(|b| Proposal {
            bbox: b.bbox,
            class_id: b.class_id,
            score: 1.0,
        })
        .collect()
}

pub fn eval_predictions(cfg: &RunConfig, scenes: &[NamedScene], preds: &[Vec<InstanceMask>]) -> Result<MetricsReport> {
    let gts: Vec<SceneGt> = scenes.iter().map(|s| SceneGt::from_cloud(&s.scene.cloud)).collect();
    evaluate(
        preds,
        &gts,
        &EvalOptions {
            num_classes: cfg.num_classes(),
            min_mask_size: cfg.min_mask_size,
        },
    )
}

pub fn cmd_eval(
    common: &Common,
    checkpoint: Option<&Path>,
    oracle: Option<Oracle>,
    data: &Path,
    split: Split,
) -> Result<MetricsReport> {
    let (model, cfg) = match (checkpoint, oracle) {
        (Some(c), _) => {
            let (m, cfg) = load_model(common, c)?;
            (Some(m), cfg)
        }
        (None, _) => (None, resolve_config(common, RunConfig::default())?),
    };
    announce(&cfg);
    let ds: Dataset = load_dataset(data)?;
    let scenes = ds.split(split);
    let preds = scenes
        .iter()
        .map(|s| match oracle {
            Some(Oracle::GtMasks) => Ok(gt_masks(s)),
            Some(Oracle::GtBoxes) => {
                let m = match &model {
                    Some(m) => m.clone(),
                    None => Model::new(cfg.model.clone(), cfg.seed)?,
                };
                m.infer_with_proposals(&s.scene.cloud, &gt_proposals(s))
            }
            None => Ok(model.as_ref().expect("checkpoint given").infer(&s.scene.cloud)?.masks),
        })
        .collect::<Result<Vec<_>>>()?;
    let report = eval_predictions(&cfg, scenes, &preds)?;
    prepare_out_dir(&common.out, true)?;
    let pred_dir = common.out.join("predictions");
    std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    for (s, p) in scenes.iter().zip(&preds) {
        write_predictions(p, &pred_dir.join(format!("{}.pred", s.name)))?;
    }
    write_file(&common.out.join("report.json"), &report.to_json())?;
    let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.to_csv_row());
    write_file(&common.out.join("report.csv"), &csv)?;
    println!("{}", report.to_json());
    print!("{csv}");
    Ok(report)
}

/// Appends `rows` (with header when the file is new) to a CSV file.
fn append_csv(path: &Path, table: &str) -> Result<()> {
    use std::io::Write as _;
    let exists = path.is_file();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let body = if exists { table.split_once('\n').map_or("", |x| x.1) } else { table };
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn cmd_ablate(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    axis: Axis,
    values: &[usize],
    repeats: Option<usize>,
) -> Result<String> {
    let (model, cfg) = load_model(common, checkpoint)?;
    announce(&cfg);
    let ds = load_dataset(data)?;
    prepare_out_dir(&common.out, true)?;
    let (table, file) = match axis {
        Axis::UnetLevels => {
            let levels = if values.is_empty() { vec![0, 1, 2, 3, 4] } else { values.to_vec() };
            let rows = ablation::unet_levels(&model, &cfg, &ds.train, &ds.val, &levels)?;
            (ablation::levels_csv(&rows), "ablate_unet_levels.csv")
        }
        Axis::ProposalCap => {
            let caps = if values.is_empty() { vec![20, 60, 100, 140] } else { values.to_vec() };
            if caps.contains(&0) {
                return Err(Error::Config("proposal caps must be positive".into()));
            }
            let rows = ablation::proposal_cap(&model, &cfg, &ds.val, &caps, repeats.unwrap_or(cfg.bench_repeats))?;
            (ablation::caps_csv(&rows), "ablate_proposal_cap.csv")
        }
    };
    append_csv(&common.out.join(file), &table)?;
    print!("{table}");
    Ok(table)
}

pub fn cmd_bench(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    repeats: Option<usize>,
    split: Split,
) -> Result<RuntimeStats> {
    let (model, cfg) = load_model(common, checkpoint)?;
    announce(&cfg);
    let ds = load_dataset(data)?;
    let stats = benchmark(ds.split(split), repeats.unwrap_or(cfg.bench_repeats), |s| {
        model.infer(&s.scene.cloud)
    })?;
    prepare_out_dir(&common.out, true)?;
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write_file(&common.out.join("bench.json"), &json)?;
    println!("{json}");
    Ok(stats)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, n_train, n_val } => {
            let n = cmd_synth(&common, n_train, n_val)?;
            println!("wrote {n} scenes to {}", common.out.display());
        }
        Command::Train { common, data, resume } => {
            let st = cmd_train(&common, &data, resume)?;
            println!(
                "trained {} epochs; best val AP {}",
                st.epochs_done,
                st.best_val_ap.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Eval {
            common,
            checkpoint,
            oracle,
            data,
            split,
        } => {
            cmd_eval(&common, checkpoint.as_deref(), oracle, &data, split.into())?;
        }
        Command::Ablate {
            common,
            checkpoint,
            data,
            axis,
            values,
            repeats,
        } => {
            cmd_ablate(&common, &checkpoint, &data, axis, &values, repeats)?;
        }
        Command::Bench {
            common,
            checkpoint,
            data,
            repeats,
            split,
        } => {
            cmd_bench(&common, &checkpoint, &data, repeats, split.into())?;
        }
    }
    Ok(())
}
