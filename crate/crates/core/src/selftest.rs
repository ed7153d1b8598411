//! Finite-difference gradient checks and mask statistics.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{HookTransform, Model, ModelSpec};
use crate::regularizers::{
    candidate_pool, score_feature_maps, BatchFactors, Regularizer, RegularizerConfig, ScoreMode,
};
use crate::rng::{Domain, Stream, StreamKey};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
/// Floor on the denominator of the relative error.
const GRAD_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(GRAD_FLOOR)
}

type LayerFn = dyn Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>;

/// Reduces `y` to a scalar: itself if it has one element, else `Σ r·y`.
fn reduce(tape: &mut GradTape<f64>, y: Var, r: Option<&Tensor<f64>>) -> Result<Var> {
    let Some(r) = r else { return Ok(y) };
    let n = tape.value(y).numel();
    let flat = tape.reshape(y, &[1, n])?;
    let w = tape.constant(r.clone().reshape(&[1, n])?);
    let b = tape.constant(Tensor::zeros(&[1]));
    tape.linear(flat, w, b)
}

fn loss_of(f: &LayerFn, inputs: &[Tensor<f64>], r: Option<&Tensor<f64>>) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let l = reduce(&mut tape, y, r)?;
    Ok(tape.value(l).data()[0])
}

/// Largest relative error over all inputs of one layer instance.
fn check_layer(f: &LayerFn, inputs: &[Tensor<f64>], diff: usize, rng: &mut Stream) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), i < diff))
        .collect();
    let y = f(&mut tape, &vars)?;
    let shape = tape.value(y).shape().to_vec();
    let r = (tape.value(y).numel() > 1)
        .then(|| Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let l = reduce(&mut tape, y, r.as_ref())?;
    let grads = tape.backward(l)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate().take(diff) {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + GRAD_STEP;
            let up = loss_of(f, &probe, r.as_ref())?;
            probe[i].data_mut()[j] = x0 - GRAD_STEP;
            let down = loss_of(f, &probe, r.as_ref())?;
            probe[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * GRAD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude at least 0.05, so `±h` never crosses zero.
fn away_from_zero(rng: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// A random permutation of `0.1·k` plus small jitter: entries are at least
/// 0.08 apart, so pooling winners never change under `±h`.
fn distinct(rng: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|k| 0.1 * k as f64).collect();
    v.shuffle(rng);
    let v = v.into_iter().map(|x| x + rng.gen_range(-0.01..0.01)).collect();
    Tensor::new(shape, v).expect("shape matches")
}

struct LayerCase {
    name: &'static str,
    inputs: fn(&mut Stream) -> Vec<Tensor<f64>>,
    /// Leading inputs that receive gradients; the rest are constants.
    diff: usize,
    f: Box<LayerFn>,
}

fn layer_cases() -> Vec<LayerCase> {
    vec![
        LayerCase {
            name: "conv2d",
            diff: 3,
            inputs: |r| {
                vec![
                    uniform(r, &[2, 3, 5, 5], -1.0, 1.0),
                    uniform(r, &[4, 3, 3, 3], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            f: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        },
        LayerCase {
            name: "conv2d_stride2_pad1",
            diff: 2,
            inputs: |r| vec![uniform(r, &[2, 2, 6, 6], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
            f: Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 1)),
        },
        LayerCase {
            name: "conv2d_1x1_stride2",
            diff: 2,
            inputs: |r| vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[2, 3, 1, 1], -1.0, 1.0)],
            f: Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 0)),
        },
        LayerCase {
            name: "relu",
            diff: 1,
            inputs: |r| vec![away_from_zero(r, &[2, 3, 4, 4])],
            f: Box::new(|t, v| t.relu(v[0])),
        },
        LayerCase {
            name: "max_pool2d",
            diff: 1,
            inputs: |r| vec![distinct(r, &[2, 2, 4, 4])],
            f: Box::new(|t, v| t.max_pool2d(v[0], 2, 2)),
        },
        LayerCase {
            name: "global_avg_pool",
            diff: 1,
            inputs: |r| vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            f: Box::new(|t, v| t.global_avg_pool(v[0])),
        },
        LayerCase {
            name: "linear",
            diff: 3,
            inputs: |r| {
                vec![
                    uniform(r, &[3, 5], -1.0, 1.0),
                    uniform(r, &[4, 5], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            f: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        },
        LayerCase {
            name: "batchnorm2d_train",
            diff: 3,
            inputs: |r| {
                vec![
                    uniform(r, &[4, 3, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            },
            f: Box::new(|t, v| Ok(t.batchnorm2d_train(v[0], v[1], v[2])?.0)),
        },
        LayerCase {
            name: "batchnorm2d_eval",
            diff: 3,
            inputs: |r| {
                vec![
                    uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -0.5, 0.5),
                    uniform(r, &[3], -0.5, 0.5),
                    uniform(r, &[3], 0.5, 2.0),
                ]
            },
            f: Box::new(|t, v| {
                let mean = t.value(v[3]).clone();
                let var = t.value(v[4]).clone();
                t.batchnorm2d_eval(v[0], v[1], v[2], &mean, &var)
            }),
        },
        LayerCase {
            name: "add",
            diff: 2,
            inputs: |r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
            f: Box::new(|t, v| t.add(v[0], v[1])),
        },
        LayerCase {
            name: "scale_channels",
            diff: 1,
            inputs: |r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[6], 0.6, 1.4)],
            f: Box::new(|t, v| {
                let f = t.value(v[1]).data().to_vec();
                t.scale_channels(v[0], f)
            }),
        },
        LayerCase {
            name: "mask",
            diff: 1,
            inputs: |r| {
                let m = Tensor::from_fn(&[24], |_| if r.gen::<f64>() < 0.9 { 1.0 / 0.9 } else { 0.0 });
                vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), m]
            },
            f: Box::new(|t, v| {
                let m = t.value(v[1]).data().to_vec();
                t.mask(v[0], m)
            }),
        },
        LayerCase {
            name: "reshape",
            diff: 1,
            inputs: |r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
            f: Box::new(|t, v| t.reshape(v[0], &[2, 12])),
        },
        LayerCase {
            name: "softmax_cross_entropy",
            diff: 1,
            inputs: |r| vec![uniform(r, &[4, 5], -2.0, 2.0)],
            f: Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])),
        },
    ]
}

/// Central difference at `h` and `h/2` disagreeing by more than this means
/// the stencil straddles a ReLU or max-pool kink.
const KINK_TOL: f64 = 1e-8;

/// Central difference of `eval` around `x0`, or `None` when the stencil
/// crosses a non-differentiable point.
fn stencil(mut eval: impl FnMut(f64) -> Result<f64>, x0: f64) -> Result<Option<f64>> {
    let h = GRAD_STEP;
    let wide = (eval(x0 + h)? - eval(x0 - h)?) / (2.0 * h);
    let narrow = (eval(x0 + h / 2.0)? - eval(x0 - h / 2.0)?) / h;
    Ok(((wide - narrow).abs() <= KINK_TOL).then_some(wide))
}

/// Gradient check of a whole ResNet-8 in training mode with a SpatialScale
/// transform at every hook. Each parameter tensor and the input are probed
/// at a few random coordinates; coordinates whose stencil crosses a kink
/// are redrawn. Returns the worst relative error and the number of redraws.
fn check_model(instance: u64, seed: u64) -> Result<(f64, usize)> {
    const PROBES: usize = 3;
    const MAX_DRAWS: usize = 20;
    let spec = ModelSpec::resnet(8, 1, 3, 6);
    let mut model = Model::<f64>::build(&spec, seed ^ instance)?;
    let mut rng = StreamKey::new(seed, Domain::Scratch).sample(instance).layer(99).stream();
    let mut x = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let labels = [0usize, 2];
    let reg = Regularizer::new(&RegularizerConfig::spatial_scale(0.4))?;
    let mask = vec![true; model.hook_names().len()];
    let key = StreamKey::new(seed, Domain::Regularizer).sample(instance);

    let loss = |m: &Model<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut tape = GradTape::new();
        let xv = tape.constant(x.clone());
        let tr = HookTransform { regularizer: &reg, mask: &mask, key };
        let out = m.forward(&mut tape, xv, true, Some(&tr))?;
        let l = tape.softmax_cross_entropy(out.logits, &labels)?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone(), true);
    let tr = HookTransform { regularizer: &reg, mask: &mask, key };
    let out = model.forward(&mut tape, xv, true, Some(&tr))?;
    let l = tape.softmax_cross_entropy(out.logits, &labels)?;
    let grads = tape.backward(l)?;

    // Target 0 is the input, target i + 1 is parameter i.
    let mut worst = 0.0f64;
    let mut redraws = 0;
    for target in 0..=out.params.len() {
        let var = if target == 0 { xv } else { out.params[target - 1] };
        let numel = if target == 0 { x.numel() } else { model.params()[target - 1].value.numel() };
        let g = grads.get(var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        let mut draws = 0;
        while a.len() < PROBES && draws < MAX_DRAWS {
            draws += 1;
            let j = rng.gen_range(0..numel);
            let numeric = if target == 0 {
                let x0 = x.data()[j];
                let r = stencil(
                    |v| {
                        x.data_mut()[j] = v;
                        loss(&model, &x)
                    },
                    x0,
                );
                x.data_mut()[j] = x0;
                r?
            } else {
                let i = target - 1;
                let p0 = model.params()[i].value.data()[j];
                let r = stencil(
                    |v| {
                        model.params_mut()[i].value.data_mut()[j] = v;
                        loss(&model, &x)
                    },
                    p0,
                );
                model.params_mut()[i].value.data_mut()[j] = p0;
                r?
            };
            match numeric {
                Some(nv) => {
                    a.push(g[j]);
                    n.push(nv);
                }
                None => redraws += 1,
            }
        }
        if a.is_empty() {
            return Err(Error::CheckFailed(format!(
                "every probe of target {target} crossed a kink"
            )));
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok((worst, redraws))
}

/// Finite-difference checks in 64-bit for every tape operation plus a whole
/// model, `instances` random draws each.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let cases = layer_cases();
    for (ci, case) in cases.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut failure = None;
        for inst in 0..instances {
            let mut rng = StreamKey::new(seed, Domain::Scratch)
                .layer(ci as u64)
                .sample(inst as u64)
                .stream();
            let inputs = (case.inputs)(&mut rng);
            match check_layer(case.f.as_ref(), &inputs, case.diff, &mut rng) {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        reports.push(grad_report(case.name, worst, instances, failure));
    }
    let mut worst = 0.0f64;
    let mut redraws = 0;
    let mut failure = None;
    for inst in 0..instances {
        match check_model(inst as u64, seed) {
            Ok((e, r)) => {
                worst = worst.max(e);
                redraws += r;
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    let mut rep = grad_report("resnet8_spatial_scale", worst, instances, failure);
    rep.detail.push_str(&format!("; {redraws} probes redrawn at kinks"));
    reports.push(rep);
    reports
}

fn grad_report(name: &str, worst: f64, instances: usize, failure: Option<String>) -> CheckReport {
    match failure {
        Some(e) => CheckReport {
            name: format!("grad {name}"),
            passed: false,
            detail: e,
        },
        None => CheckReport {
            name: format!("grad {name}"),
            passed: worst.is_finite() && worst < GRAD_TOL,
            detail: format!("max relative error {worst:.3e} over {instances} instances (tolerance {GRAD_TOL:e})"),
        },
    }
}

/// Per-map factors of a batch under `reg`.
fn map_factors(reg: &Regularizer, y: &Tensor<f64>, key: StreamKey) -> Result<Vec<f64>> {
    let n = y.shape()[0];
    match reg.factors(y, &mut key.sample_streams(n), true, true)? {
        BatchFactors::PerMap(f) | BatchFactors::PerElement(f) => Ok(f),
        BatchFactors::Identity => Ok(vec![1.0; y.numel()]),
    }
}

fn drop_report(name: &str, factors: &[f64], p: f64) -> CheckReport {
    let dropped = factors.iter().filter(|&&f| f == 0.0).count();
    let frac = dropped as f64 / factors.len() as f64;
    let keep = 1.0 / p;
    let binary = factors.iter().all(|&f| f == 0.0 || f == keep);
    CheckReport {
        name: format!("mask {name}"),
        passed: binary && (frac - (1.0 - p)).abs() <= 0.01,
        detail: format!(
            "drop fraction {frac:.4} over {} units (target {:.2} ± 0.01); factors in {{0, 1/p}}: {binary}",
            factors.len(),
            1.0 - p
        ),
    }
}

fn scale_report(name: &str, factors: &[f64], q: f64) -> CheckReport {
    let mean = factors.iter().sum::<f64>() / factors.len() as f64;
    let lo = factors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = factors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inside = lo >= 1.0 - q && hi <= 1.0 + q;
    CheckReport {
        name: format!("mask {name}"),
        passed: inside && (mean - 1.0).abs() <= 0.005,
        detail: format!(
            "mean factor {mean:.5} over {} maps (target 1 ± 0.005); range [{lo:.4}, {hi:.4}] within [{:.2}, {:.2}]: {inside}",
            factors.len(),
            1.0 - q,
            1.0 + q
        ),
    }
}

/// Drop fractions and scale-factor moments over 10⁵ units or maps.
pub fn mask_suite(seed: u64) -> Result<Vec<CheckReport>> {
    const P: f64 = 0.9;
    const Q: f64 = 0.4;
    let key = |m: u64| StreamKey::new(seed, Domain::Scratch).layer(1000 + m);
    let mut data_rng = key(0).stream();
    let mut out = Vec::new();

    let reg = Regularizer::new(&RegularizerConfig::dropout(P))?;
    let y = Tensor::<f64>::ones(&[10, 100, 10, 10]);
    out.push(drop_report("dropout", &map_factors(&reg, &y, key(1))?, P));

    let reg = Regularizer::new(&RegularizerConfig::spatial_dropout(P))?;
    let y = Tensor::<f64>::ones(&[1000, 100, 1, 1]);
    out.push(drop_report("spatial_dropout", &map_factors(&reg, &y, key(2))?, P));

    let reg = Regularizer::new(&RegularizerConfig::spatial_scale(Q))?;
    out.push(scale_report("spatial_scale", &map_factors(&reg, &y, key(3))?, Q));

    // 5000 samples of 100 maps with t = 0.2 give 10⁵ candidate maps.
    let reg = Regularizer::new(&RegularizerConfig::select_scale(0.2, Q))?;
    let y = uniform(&mut data_rng, &[5000, 100, 2, 2], 0.0, 1.0);
    let f = map_factors(&reg, &y, key(4))?;
    let pools: Vec<Vec<usize>> = (0..5000)
        .map(|s| {
            let map = Tensor::new(&[100, 2, 2], y.sample(s).to_vec())?;
            Ok(candidate_pool(&score_feature_maps(&map, ScoreMode::Max)?, 0.2))
        })
        .collect::<Result<_>>()?;
    let mut cand = Vec::new();
    let mut others_exact = true;
    for (s, pool) in pools.iter().enumerate() {
        for c in 0..100 {
            let v = f[s * 100 + c];
            if pool.contains(&c) {
                cand.push(v);
            } else if v != 1.0 {
                others_exact = false;
            }
        }
    }
    let mut rep = scale_report("select_scale", &cand, Q);
    rep.passed &= others_exact;
    rep.detail.push_str(&format!("; non-candidates exactly 1: {others_exact}"));
    out.push(rep);

    Ok(out)
}
