//! Command-line front end. Each `cmd_*` function is usable on its own; [`run`]
//! dispatches parsed arguments to them.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{ablate, cam, AblationCurve, AblationSettings, HeatMap};
use crate::checkpoint;
use crate::config::{parse_override, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::regularizers::Method;
use crate::selftest::{gradient_suite, mask_suite, CheckReport};
use crate::trainer::{evaluate, metrics_csv, train, MetricsRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ssck";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "selectscale", version, about = "Train and analyse CNNs with feature-map regularizers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.csv and checkpoint.ssck.
    Train(Common),
    /// Print the test error of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Inference-time drop ablation of a checkpoint.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// spatial_dropout, selectout, or dropout.
        #[arg(long, default_value = "selectout")]
        method: String,
        /// Comma-separated retaining rates, strictly decreasing.
        #[arg(long, default_value = "1.0,0.94,0.9,0.85,0.8,0.75,0.7")]
        rates: String,
        /// Skip the 1/p rescale of kept maps.
        #[arg(long)]
        raw: bool,
        /// Selectout top rate; defaults to 1 - rate at each rate.
        #[arg(long)]
        top_rate: Option<f64>,
    },
    /// Class activation map of one evaluation image.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image index in the evaluation split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class to map; defaults to the image's label.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Gradient and mask-statistics checks.
    Selftest {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Loads the config file (or defaults) with overrides applied in order and
/// `--seed` last.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_pairs(&overrides),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains per `cfg`, writing `metrics.csv` and `checkpoint.ssck` into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricsRow>> {
    let (train_set, test_set) = cfg.load_data()?;
    let mut model = Model::<f32>::build(&cfg.model, cfg.train.seed)?;
    let outcome = train(&mut model, &train_set, test_set.as_ref(), &cfg.train, &cfg.reg)?;
    write(&out.join(METRICS_FILE), metrics_csv(&outcome.metrics).as_bytes())?;
    write(&out.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
    Ok(outcome.metrics)
}

/// Builds the configured model and loads weights from an SSCK file.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<Model<f32>> {
    let tensors = checkpoint::load(path)?;
    let mut model = Model::<f32>::build(&cfg.model, cfg.train.seed)?;
    model.load_state(&tensors)?;
    Ok(model)
}

/// Loss and error of a checkpoint on the evaluation split.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(f64, f64)> {
    let model = load_model(cfg, checkpoint)?;
    evaluate(&model, &cfg.eval_data()?, cfg.train.batch_size)
}

pub fn parse_rates(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.parse()
                .map_err(|_| Error::key("ablate.rates", format!("cannot parse `{r}` as a rate")))
        })
        .collect()
}

/// Ablation curve of a checkpoint; the ablation seed is `train.seed`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    method: Method,
    rates: Vec<f64>,
    rescale: bool,
    top_rate: Option<f64>,
) -> Result<AblationCurve> {
    let model = load_model(cfg, checkpoint)?;
    let mut settings = AblationSettings::new(method, rates, cfg.train.seed);
    settings.rescale = rescale;
    settings.top_rate = top_rate;
    settings.placement = cfg.reg.placement.clone();
    settings.batch_size = cfg.train.batch_size;
    ablate(&model, &cfg.eval_data()?, &settings)
}

pub fn cmd_cam(cfg: &ExperimentConfig, checkpoint: &Path, index: usize, class: Option<usize>) -> Result<HeatMap> {
    let model = load_model(cfg, checkpoint)?;
    let data = cfg.eval_data()?;
    let image = data.images.get(index).ok_or_else(|| {
        Error::key("cam.index", format!("index {index} is out of range for {} images", data.len()))
    })?;
    cam(&model, &image.pixels, class.unwrap_or(image.label))
}

pub fn cmd_selftest(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = gradient_suite(instances, seed);
    reports.extend(mask_suite(seed)?);
    Ok(reports)
}

/// Runs a parsed command, printing results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve_config(&common)?;
            let rows = cmd_train(&cfg, &common.out)?;
            if let Some(last) = rows.last() {
                println!(
                    "epoch {} {} loss {:.4} error {:.4}",
                    last.epoch, last.split, last.loss, last.error_rate
                );
            }
            println!("wrote {}", common.out.join(METRICS_FILE).display());
            println!("wrote {}", common.out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve_config(&common)?;
            let (loss, error) = cmd_eval(&cfg, &checkpoint)?;
            println!("loss {loss}");
            println!("error {error}");
        }
        Command::Ablate {
            common,
            checkpoint,
            method,
            rates,
            raw,
            top_rate,
        } => {
            let cfg = resolve_config(&common)?;
            let method = method.parse::<Method>().map_err(|e| match e {
                Error::InvalidKey { reason, .. } => Error::key("ablate.method", reason),
                other => other,
            })?;
            let curve = cmd_ablate(&cfg, &checkpoint, method, parse_rates(&rates)?, !raw, top_rate)?;
            let csv = curve.to_csv();
            print!("{csv}");
            write(&common.out.join(ABLATION_FILE), csv.as_bytes())?;
        }
        Command::Cam {
            common,
            checkpoint,
            index,
            class,
        } => {
            let cfg = resolve_config(&common)?;
            let map = cmd_cam(&cfg, &checkpoint, index, class)?;
            let stem = format!("cam_{index}_{}", map.class);
            let pgm = common.out.join(format!("{stem}.pgm"));
            write(&pgm, &map.to_pgm())?;
            write(&common.out.join(format!("{stem}.csv")), map.to_csv().as_bytes())?;
            println!("wrote {} (layer {}, class {})", pgm.display(), map.layer, map.class);
        }
        Command::Selftest { instances, seed } => {
            let reports = cmd_selftest(instances, seed)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::CheckFailed(format!("{failed} of {} checks", reports.len())));
            }
            println!("all {} checks passed", reports.len());
        }
    }
    Ok(())
}
