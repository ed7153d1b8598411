//! Minibatch SGD with momentum, learning-rate schedules, and per-epoch
//! metrics.

use std::fmt;
use std::str::FromStr;

use crate::checkpoint;
use crate::data::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::model::{HookTransform, Model};
use crate::regularizers::RegularizerConfig;
use crate::rng::{Domain, StreamKey};
use crate::tape::GradTape;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// Multiply by `factor` at each milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
    /// Cosine annealing from `lr_init` towards `lr_min`.
    Cosine { lr_min: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Test-split metrics are recorded every `eval_every` epochs and after
    /// the last one.
    pub eval_every: usize,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr_init: 0.1,
            schedule: LrSchedule::Step {
                milestones: vec![60, 120, 160],
                factor: 0.2,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 1,
            eval_every: 1,
            batch_size: 128,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::key("train.lr", "initial learning rate must be positive"));
        }
        if let LrSchedule::Step { milestones, factor } = &self.schedule {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::key("train.milestones", "milestones must be strictly increasing"));
            }
            if let Some(&last) = milestones.last() {
                if last >= self.epochs {
                    return Err(Error::key(
                        "train.milestones",
                        format!("milestone {last} is not below the epoch count {}", self.epochs),
                    ));
                }
            }
            if !(*factor > 0.0) {
                return Err(Error::key("train.factor", "step factor must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::key("train.momentum", "momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::key("train.wd", "weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::key("data.batch_size", "batch size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::key("train.eval_every", "eval_every must be positive"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    match &config.schedule {
        LrSchedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
            // Dividing by an integral inverse factor keeps decimal schedules
            // such as 0.1 → 0.02 → 0.004 exact in binary floating point.
            let inv = 1.0 / factor;
            if (inv - inv.round()).abs() < 1e-9 {
                config.lr_init / inv.round().powi(passed)
            } else {
                config.lr_init * factor.powi(passed)
            }
        }
        LrSchedule::Cosine { lr_min } => {
            let frac = epoch as f64 / config.epochs.max(1) as f64;
            lr_min + 0.5 * (config.lr_init - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// One SGD step with coupled weight decay:
/// `v ← momentum·v + grad + wd·param`, `param ← param − lr·v`.
pub fn sgd_step<T: Scalar>(
    name: &str,
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(format!(
            "`{name}`: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub error_rate: f64,
    pub lr: f64,
    pub effective_rate: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,error,lr,effective_rate";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.split, r.loss, r.error_rate, r.lr, r.effective_rate
        ));
    }
    s
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    /// Final weights in `SSCK` format.
    pub checkpoint: Vec<u8>,
}

/// Mean loss and error rate of the model in evaluation mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let mut loss = 0.0;
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk, None)?;
        let mut tape = GradTape::new();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, xv, false, None)?;
        let l = tape.softmax_cross_entropy(out.logits, &labels)?;
        loss += tape.value(l).data()[0].as_f64() * chunk.len() as f64;
        wrong += count_errors(tape.value(out.logits).data(), &labels);
    }
    Ok((loss / data.len() as f64, wrong as f64 / data.len() as f64))
}

/// Misclassified rows of a `[N, K]` logit buffer; ties resolve to the lowest
/// class index.
pub fn count_errors<T: Scalar>(logits: &[T], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    logits
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) != label)
        .count()
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place. The regularizer is attached to the model and is
/// active only in training forwards; its curriculum is evaluated per epoch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    config: &TrainConfig,
    reg: &RegularizerConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.attach_regularizer(reg)?;
    if train_data.is_empty() && config.epochs > 0 {
        return Err(Error::config("training set is empty"));
    }
    let mut velocity: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|p| vec![T::zero(); p.value.numel()])
        .collect();
    let mut metrics = Vec::new();
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let effective_rate = reg.effective_rate(epoch, config.epochs);
        let hooks = model.regularizer_at(epoch, config.epochs)?;
        let order = epoch_order(train_data.len(), config.seed, epoch);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let augment = config.augment.then_some((config.seed, epoch));
            let (x, labels) = train_data.batch::<T>(chunk, augment)?;
            let mut tape = GradTape::new();
            let xv = tape.constant(x);
            let key = StreamKey::new(config.seed, Domain::Regularizer)
                .epoch(epoch as u64)
                .batch(b as u64);
            let transform = hooks.as_ref().map(|(regularizer, mask)| HookTransform {
                regularizer,
                mask,
                key,
            });
            let out = model.forward(&mut tape, xv, true, transform.as_ref())?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            if tape.value(loss).data()[0].is_nan() {
                return Err(Error::LossNaN { epoch, batch: b });
            }
            let mut grads = tape.backward(loss)?;
            let param_vars = out.params.clone();
            model.apply_bn_updates(out.bn_updates);
            for (i, (p, var)) in model.params_mut().iter_mut().zip(param_vars).enumerate() {
                let Some(g) = grads.take(var) else { continue };
                let wd = if p.decay { config.weight_decay } else { 0.0 };
                sgd_step(
                    &p.name,
                    p.value.data_mut(),
                    g.data(),
                    &mut velocity[i],
                    lr,
                    config.momentum,
                    wd,
                )?;
            }
        }
        let (loss, error_rate) = evaluate(model, train_data, config.batch_size)?;
        metrics.push(MetricsRow {
            epoch,
            split: Split::Train,
            loss,
            error_rate,
            lr,
            effective_rate,
        });
        if let Some(test) = test_data {
            if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
                let (loss, error_rate) = evaluate(model, test, config.batch_size)?;
                metrics.push(MetricsRow {
                    epoch,
                    split: Split::Test,
                    loss,
                    error_rate,
                    lr,
                    effective_rate,
                });
            }
        }
    }
    let checkpoint = checkpoint::encode(&model.state())?;
    Ok(TrainOutcome {
        metrics,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_dataset;
    use crate::model::ModelSpec;

    fn step_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            ..Default::default()
        }
    }

    #[test]
    fn step_schedule_values() {
        let c = step_cfg();
        assert_eq!(lr_at(0, &c), 0.1);
        assert_eq!(lr_at(59, &c), 0.1);
        assert_eq!(lr_at(60, &c), 0.02);
        assert_eq!(lr_at(61, &c), 0.02);
        assert_eq!(lr_at(120, &c), 0.004);
        assert_eq!(lr_at(199, &c), 0.0008);
    }

    #[test]
    fn non_integral_inverse_factor() {
        let c = TrainConfig {
            schedule: LrSchedule::Step {
                milestones: vec![10],
                factor: 0.3,
            },
            epochs: 20,
            ..Default::default()
        };
        assert!((lr_at(10, &c) - 0.03).abs() < 1e-17);
    }

    #[test]
    fn cosine_schedule() {
        let c = TrainConfig {
            epochs: 100,
            schedule: LrSchedule::Cosine { lr_min: 0.0 },
            ..Default::default()
        };
        assert_eq!(lr_at(0, &c), 0.1);
        assert_eq!(lr_at(50, &c), 0.05);
        assert!(lr_at(99, &c) < 1e-4);
    }

    #[test]
    fn sgd_closed_forms() {
        let mut w = [1.0f64, -2.0];
        let mut v = [0.0; 2];
        sgd_step("w", &mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, [1.0, -2.0]);

        let mut w = [1.0f64];
        let mut v = [0.0];
        sgd_step("w", &mut w, &[0.0], &mut v, 0.1, 0.0, 0.0005).unwrap();
        assert_eq!(w[0], 1.0 - 0.1 * 0.0005);
    }

    #[test]
    fn sgd_two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.05, 0.9, 0.01);
        let (g1, g2) = (0.3, -0.7);
        let mut w = [2.0f64];
        let mut v = [0.0];
        sgd_step("w", &mut w, &[g1], &mut v, lr, mu, wd).unwrap();
        sgd_step("w", &mut w, &[g2], &mut v, lr, mu, wd).unwrap();
        // Hand-unrolled.
        let w0 = 2.0;
        let v1 = g1 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * w1;
        let w2 = w1 - lr * v2;
        assert!((w[0] - w2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut w = [1.0f32];
        let mut v = [0.0];
        let err = sgd_step("s1.b0.c1.conv.weight", &mut w, &[f32::NAN], &mut v, 0.1, 0.9, 0.0)
            .unwrap_err();
        assert!(err.to_string().contains("s1.b0.c1.conv.weight"));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig {
            epochs: 100,
            ..Default::default()
        };
        c.schedule = LrSchedule::Step {
            milestones: vec![60, 60],
            factor: 0.2,
        };
        assert!(c.validate().is_err());
        c.schedule = LrSchedule::Step {
            milestones: vec![60, 120],
            factor: 0.2,
        };
        assert!(c.validate().is_err());
        c.lr_init = 0.0;
        c.schedule = LrSchedule::Cosine { lr_min: 0.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = ModelSpec::resnet(8, 1, 3, 8);
        let mut model = Model::<f32>::build(&spec, 4).unwrap();
        let init = checkpoint::encode(&model.state()).unwrap();
        let data = synthesize_dataset(3, 6, 1, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            schedule: LrSchedule::Step {
                milestones: vec![],
                factor: 0.2,
            },
            ..Default::default()
        };
        let out = train(&mut model, &data, None, &cfg, &RegularizerConfig::default()).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.checkpoint, init);
    }

    #[test]
    fn csv_header() {
        let rows = [MetricsRow {
            epoch: 0,
            split: Split::Test,
            loss: 1.5,
            error_rate: 0.25,
            lr: 0.1,
            effective_rate: 0.9,
        }];
        assert_eq!(
            metrics_csv(&rows),
            "epoch,split,loss,error,lr,effective_rate\n0,test,1.5,0.25,0.1,0.9\n"
        );
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(count_errors(&[0.0f32, 0.0, 1.0, 0.0], &[0, 1]), 1);
    }
}
