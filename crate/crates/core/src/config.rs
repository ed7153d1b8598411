//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment. Keys are grouped by
//! prefix (`model.`, `data.`, `train.`, `reg.`). Unknown keys are rejected.
//! Later assignments win, so command-line overrides are applied after the
//! file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_cifar_binary, synthesize_split, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{Head, HookPoint, ModelKind, ModelSpec};
use crate::regularizers::{Method, Placement, RegularizerConfig, ScoreMode};
use crate::trainer::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    CifarBinary,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub limit: Option<usize>,
    pub test_path: Option<PathBuf>,
    pub test_limit: Option<usize>,
    /// Synthetic set sizes, image side, and generator seed.
    pub n: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
    /// Fixed standardization constants; computed from the training subset
    /// when absent.
    pub mean: Option<[f64; 3]>,
    pub std: Option<[f64; 3]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            path: None,
            limit: None,
            test_path: None,
            test_limit: None,
            n: 300,
            n_test: 300,
            size: 16,
            seed: 1,
            mean: None,
            std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub reg: RegularizerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        ExperimentConfig {
            model: ModelSpec::resnet(8, 1, 10, data.size),
            data,
            train: TrainConfig::default(),
            reg: RegularizerConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.kind",
    "model.depth",
    "model.width",
    "model.classes",
    "model.hook_point",
    "model.head",
    "data.kind",
    "data.path",
    "data.limit",
    "data.test_path",
    "data.test_limit",
    "data.batch_size",
    "data.augment",
    "data.n",
    "data.n_test",
    "data.size",
    "data.seed",
    "data.mean",
    "data.std",
    "train.epochs",
    "train.lr",
    "train.schedule",
    "train.milestones",
    "train.factor",
    "train.momentum",
    "train.wd",
    "train.seed",
    "train.lr_min",
    "train.eval_every",
    "reg.method",
    "reg.t",
    "reg.p",
    "reg.q",
    "reg.score_mode",
    "reg.placement",
    "reg.curriculum_start",
    "reg.curriculum_end",
];

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::key(key, format!("cannot parse `{v}` as a number")))
}

fn triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts = v
        .split(',')
        .map(|p| num::<f64>(key, p.trim()))
        .collect::<Result<Vec<_>>>()?;
    parts
        .try_into()
        .map_err(|_| Error::key(key, "expected three comma-separated values"))
}

fn on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::key(key, format!("expected on or off, got `{v}`"))),
    }
}

fn rekey(key: &str, e: Error) -> Error {
    match e {
        Error::InvalidKey { .. } => e,
        other => Error::key(key, other.to_string()),
    }
}

#[derive(Default)]
struct ScheduleParts {
    schedule: Option<String>,
    milestones: Option<Vec<usize>>,
    factor: Option<f64>,
    lr_min: Option<f64>,
    curriculum_start: Option<f64>,
    curriculum_end: Option<f64>,
}

impl ExperimentConfig {
    /// Builds a config from defaults plus `pairs` applied in order, then
    /// validates every section.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut parts = ScheduleParts::default();
        for (k, v) in pairs {
            cfg.set(k, v, &mut parts)?;
        }
        cfg.finish(parts)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config file `{}`: {e}", path.display()))
        })?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    fn set(&mut self, key: &str, v: &str, parts: &mut ScheduleParts) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        let r = &mut self.reg;
        let m = &mut self.model;
        match key {
            "model.kind" => m.kind = v.parse::<ModelKind>()?,
            "model.depth" => m.depth = num(key, v)?,
            "model.width" => m.width = num(key, v)?,
            "model.classes" => m.num_classes = num(key, v)?,
            "model.hook_point" => m.hook_point = v.parse::<HookPoint>()?,
            "model.head" => m.head = v.parse::<Head>()?,
            "data.kind" => {
                d.kind = match v {
                    "cifar_binary" => DataKind::CifarBinary,
                    "synthetic" => DataKind::Synthetic,
                    _ => return Err(Error::key(key, format!("expected cifar_binary or synthetic, got `{v}`"))),
                }
            }
            "data.path" => d.path = Some(PathBuf::from(v)),
            "data.limit" => d.limit = Some(num(key, v)?),
            "data.test_path" => d.test_path = Some(PathBuf::from(v)),
            "data.test_limit" => d.test_limit = Some(num(key, v)?),
            "data.batch_size" => t.batch_size = num(key, v)?,
            "data.augment" => t.augment = on_off(key, v)?,
            "data.n" => d.n = num(key, v)?,
            "data.n_test" => d.n_test = num(key, v)?,
            "data.size" => d.size = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            "data.mean" => d.mean = Some(triple(key, v)?),
            "data.std" => d.std = Some(triple(key, v)?),
            "train.epochs" => t.epochs = num(key, v)?,
            "train.lr" => t.lr_init = num(key, v)?,
            "train.schedule" => parts.schedule = Some(v.to_string()),
            "train.milestones" => {
                parts.milestones = Some(
                    v.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| num(key, s))
                        .collect::<Result<_>>()?,
                )
            }
            "train.factor" => parts.factor = Some(num(key, v)?),
            "train.momentum" => t.momentum = num(key, v)?,
            "train.wd" => t.weight_decay = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.lr_min" => parts.lr_min = Some(num(key, v)?),
            "train.eval_every" => t.eval_every = num(key, v)?,
            "reg.method" => r.method = v.parse::<Method>()?,
            "reg.t" => r.top_rate = num(key, v)?,
            "reg.p" => r.retain = num(key, v)?,
            "reg.q" => r.half_width = num(key, v)?,
            "reg.score_mode" => r.score_mode = v.parse::<ScoreMode>().map_err(|e| rekey(key, e))?,
            "reg.placement" => r.placement = v.parse::<Placement>()?,
            "reg.curriculum_start" => parts.curriculum_start = Some(num(key, v)?),
            "reg.curriculum_end" => parts.curriculum_end = Some(num(key, v)?),
            _ => {
                return Err(Error::key(
                    key,
                    format!("unknown key; known keys are {}", KEYS.join(", ")),
                ))
            }
        }
        Ok(())
    }

    fn finish(&mut self, parts: ScheduleParts) -> Result<()> {
        let milestones = parts.milestones.unwrap_or_else(|| match &self.train.schedule {
            LrSchedule::Step { milestones, .. } => milestones.clone(),
            LrSchedule::Cosine { .. } => Vec::new(),
        });
        self.train.schedule = match parts.schedule.as_deref().unwrap_or("step") {
            "step" => LrSchedule::Step {
                milestones,
                factor: parts.factor.unwrap_or(0.2),
            },
            "cosine" => LrSchedule::Cosine {
                lr_min: parts.lr_min.unwrap_or(0.0),
            },
            other => {
                return Err(Error::key(
                    "train.schedule",
                    format!("expected step or cosine, got `{other}`"),
                ))
            }
        };
        self.reg.curriculum = match (parts.curriculum_start, parts.curriculum_end) {
            (None, None) => None,
            (Some(s), Some(e)) => Some((s, e)),
            (Some(_), None) => {
                return Err(Error::key("reg.curriculum_end", "set together with reg.curriculum_start"))
            }
            (None, Some(_)) => {
                return Err(Error::key("reg.curriculum_start", "set together with reg.curriculum_end"))
            }
        };
        let side = match self.data.kind {
            DataKind::CifarBinary => 32,
            DataKind::Synthetic => self.data.size,
        };
        self.model.input_shape = [3, side, side];
        if self.data.kind == DataKind::CifarBinary && self.data.path.is_none() {
            return Err(Error::key("data.path", "cifar_binary data needs a path"));
        }
        if self.data.std.is_some_and(|s| s.iter().any(|&v| !(v > 0.0))) {
            return Err(Error::key("data.std", "standard deviations must be positive"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.reg.validate()?;
        Ok(())
    }

    fn fixed_normalization(&self) -> Option<Normalization> {
        match (self.data.mean, self.data.std) {
            (None, None) => None,
            (mean, std) => Some(Normalization {
                mean: mean.unwrap_or([0.0; 3]),
                std: std.unwrap_or([1.0; 3]),
            }),
        }
    }

    /// Training set and, when available, the test set. The test set is
    /// standardized with the training set's constants.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let classes = self.model.num_classes;
        let norm = self.fixed_normalization();
        let d = &self.data;
        match d.kind {
            DataKind::Synthetic => {
                let train = synthesize_split(classes, d.n, d.seed, d.size, 0, norm)?;
                let test = (d.n_test > 0)
                    .then(|| synthesize_split(classes, d.n_test, d.seed, d.size, 1, Some(train.normalization)))
                    .transpose()?;
                Ok((train, test))
            }
            DataKind::CifarBinary => {
                let path = d.path.as_ref().expect("checked in finish");
                let train = load_cifar_binary(path, d.limit, classes, norm)?;
                let test = d
                    .test_path
                    .as_ref()
                    .map(|p| load_cifar_binary(p, d.test_limit, classes, Some(train.normalization)))
                    .transpose()?;
                Ok((train, test))
            }
        }
    }

    /// The split used by evaluation commands: the test set if there is one,
    /// else the training set.
    pub fn eval_data(&self) -> Result<Dataset> {
        let (train, test) = self.load_data()?;
        Ok(test.unwrap_or(train))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &[(&str, &str)]) -> Vec<(String, String)> {
        s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let p = parse_pairs("# header\n\nmodel.depth = 14  # inline\nreg.method=selectout\n").unwrap();
        assert_eq!(p, pairs(&[("model.depth", "14"), ("reg.method", "selectout")]));
        assert!(parse_pairs("model.depth 14").is_err());
    }

    #[test]
    fn unknown_key_is_rejected_with_name() {
        let err = ExperimentConfig::from_pairs(&pairs(&[("train.lr_init", "0.1")])).unwrap_err();
        assert!(matches!(&err, Error::InvalidKey { key, .. } if key == "train.lr_init"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn later_assignment_wins() {
        let cfg = ExperimentConfig::from_pairs(&pairs(&[
            ("reg.method", "select_scale"),
            ("reg.method", "none"),
        ]))
        .unwrap();
        assert_eq!(cfg.reg.method, Method::None);
    }

    #[test]
    fn schedule_assembly() {
        let cfg = ExperimentConfig::from_pairs(&pairs(&[
            ("train.epochs", "30"),
            ("train.milestones", "15, 25"),
            ("train.factor", "0.1"),
        ]))
        .unwrap();
        assert_eq!(
            cfg.train.schedule,
            LrSchedule::Step {
                milestones: vec![15, 25],
                factor: 0.1
            }
        );
        let cfg = ExperimentConfig::from_pairs(&pairs(&[
            ("train.epochs", "10"),
            ("train.schedule", "cosine"),
            ("train.lr_min", "0.001"),
        ]))
        .unwrap();
        assert_eq!(cfg.train.schedule, LrSchedule::Cosine { lr_min: 0.001 });
    }

    #[test]
    fn validation_names_the_key() {
        let err = ExperimentConfig::from_pairs(&pairs(&[
            ("reg.method", "selectout"),
            ("reg.t", "0.05"),
            ("reg.p", "0.9"),
        ]))
        .unwrap_err();
        assert!(err.to_string().contains("reg.p"), "{err}");
        let err = ExperimentConfig::from_pairs(&pairs(&[("train.epochs", "100")])).unwrap_err();
        assert!(err.to_string().contains("train.milestones"), "{err}");
        let err = ExperimentConfig::from_pairs(&pairs(&[("reg.curriculum_start", "1.0")])).unwrap_err();
        assert!(err.to_string().contains("reg.curriculum_end"), "{err}");
        let err = ExperimentConfig::from_pairs(&pairs(&[("model.depth", "abc")])).unwrap_err();
        assert!(err.to_string().contains("model.depth"), "{err}");
    }

    #[test]
    fn synthetic_input_shape_follows_size() {
        let cfg = ExperimentConfig::from_pairs(&pairs(&[("data.size", "8"), ("model.classes", "3")])).unwrap();
        assert_eq!(cfg.model.input_shape, [3, 8, 8]);
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!(train.len(), 300);
        assert_eq!(test.unwrap().normalization, train.normalization);
    }

    #[test]
    fn missing_file_names_path() {
        let err = ExperimentConfig::load(Path::new("/no/such/exp.cfg"), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/no/such/exp.cfg"));
    }
}
