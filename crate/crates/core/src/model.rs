//! Model builders: a plain conv stack and the CIFAR ResNet / wide-ResNet
//! template (`6n + 2` layers, stage widths `k · (16, 32, 64)`).
//!
//! Every conv+BN unit exposes a named hook. With `HookPoint::PostRelu` the
//! hook sits after the unit's ReLU (for the second conv of a residual block,
//! after the post-addition ReLU); with `HookPoint::PostBn` it sits directly
//! after batch norm.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::regularizers::{BatchFactors, Placement, Regularizer, RegularizerConfig};
use crate::rng::{Domain, StreamKey};
use crate::tape::{BatchStats, GradTape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PlainCnn,
    ResNet,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_cnn" => Ok(ModelKind::PlainCnn),
            "resnet" => Ok(ModelKind::ResNet),
            _ => Err(Error::key(
                "model.kind",
                format!("unknown model kind `{s}` (expected plain_cnn or resnet)"),
            )),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::PlainCnn => "plain_cnn",
            ModelKind::ResNet => "resnet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookPoint {
    PostRelu,
    PostBn,
}

impl FromStr for HookPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post_relu" => Ok(HookPoint::PostRelu),
            "post_bn" => Ok(HookPoint::PostBn),
            _ => Err(Error::key(
                "model.hook_point",
                format!("unknown hook point `{s}` (expected post_relu or post_bn)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Global average pooling followed by a linear classifier.
    GapLinear,
    /// Flatten followed by a linear classifier.
    FlattenLinear,
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(Head::GapLinear),
            "flatten" => Ok(Head::FlattenLinear),
            _ => Err(Error::key(
                "model.head",
                format!("unknown head `{s}` (expected gap or flatten)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Conv layer count for `plain_cnn`; `6n + 2` for `resnet`.
    pub depth: usize,
    /// Width multiplier `k`.
    pub width: usize,
    pub num_classes: usize,
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
    pub hook_point: HookPoint,
    pub head: Head,
}

impl ModelSpec {
    pub fn resnet(depth: usize, width: usize, num_classes: usize, size: usize) -> Self {
        ModelSpec {
            kind: ModelKind::ResNet,
            depth,
            width,
            num_classes,
            input_shape: [3, size, size],
            hook_point: HookPoint::PostRelu,
            head: Head::GapLinear,
        }
    }

    pub fn plain_cnn(depth: usize, width: usize, num_classes: usize, size: usize) -> Self {
        ModelSpec {
            kind: ModelKind::PlainCnn,
            ..Self::resnet(depth, width, num_classes, size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::key("model.width", "width multiplier must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::key("model.classes", "need at least two classes"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        match self.kind {
            ModelKind::ResNet => {
                if self.depth < 8 || self.depth % 6 != 2 {
                    return Err(Error::key(
                        "model.depth",
                        format!("resnet depth must be 6n + 2 with n >= 1, got {}", self.depth),
                    ));
                }
                if self.head != Head::GapLinear {
                    return Err(Error::key("model.head", "resnet uses the gap head"));
                }
            }
            ModelKind::PlainCnn => {
                if self.depth == 0 {
                    return Err(Error::key("model.depth", "plain_cnn needs at least one conv layer"));
                }
            }
        }
        Ok(())
    }

    /// Blocks per stage for the residual template.
    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies (false for batch-norm scale and shift).
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    stride: usize,
    pad: usize,
    hook: Option<usize>,
}

#[derive(Debug, Clone)]
enum Block {
    Plain { unit: ConvBn, pool: bool },
    Residual {
        first: ConvBn,
        second: ConvBn,
        shortcut: Option<ConvBn>,
    },
}

/// A regularizer bound to hook points for one forward pass.
pub struct HookTransform<'a> {
    pub regularizer: &'a Regularizer,
    /// One flag per hook, in [`Model::hook_names`] order.
    pub mask: &'a [bool],
    /// Stream key with seed, domain, epoch and batch set; the hook index and
    /// sample position are filled in per draw.
    pub key: StreamKey,
}

/// Batch statistics to fold into the running estimates of one BN layer.
pub struct BnUpdate<T> {
    running_mean: usize,
    running_var: usize,
    stats: BatchStats<T>,
}

pub struct ForwardOut<T> {
    pub logits: Var,
    /// Last feature maps before the head.
    pub features: Var,
    /// Tape vars of the parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Debug, Clone)]
struct Attached {
    config: RegularizerConfig,
    mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    stem: Option<ConvBn>,
    blocks: Vec<Block>,
    fc_weight: usize,
    fc_bias: usize,
    hooks: Vec<String>,
    attached: Option<Attached>,
}

struct Builder<T: Scalar> {
    seed: u64,
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    hooks: Vec<String>,
}

impl<T: Scalar> Builder<T> {
    fn stream(&self) -> crate::rng::Stream {
        StreamKey::new(self.seed, Domain::Init)
            .layer(self.params.len() as u64)
            .stream()
    }

    fn param(&mut self, name: String, value: Tensor<T>, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, value: Tensor<T>) -> usize {
        self.buffers.push((name, value));
        self.buffers.len() - 1
    }

    fn conv_bn(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        hooked: bool,
    ) -> ConvBn {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = self.stream();
        let w = Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| {
            T::of(std * rng.sample::<f64, _>(StandardNormal))
        });
        let weight = self.param(format!("{name}.conv.weight"), w, true);
        let gamma = self.param(format!("{name}.bn.gamma"), Tensor::ones(&[out_ch]), false);
        let beta = self.param(format!("{name}.bn.beta"), Tensor::zeros(&[out_ch]), false);
        let running_mean = self.buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[out_ch]));
        let running_var = self.buffer(format!("{name}.bn.running_var"), Tensor::ones(&[out_ch]));
        let hook = hooked.then(|| {
            self.hooks.push(name.to_string());
            self.hooks.len() - 1
        });
        ConvBn {
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
            stride,
            pad: kernel / 2,
            hook,
        }
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = self.stream();
        let w = Tensor::from_fn(&[fan_out, fan_in], |_| T::of(rng.gen_range(-bound..bound)));
        let weight = self.param("fc.weight".into(), w, true);
        let bias = self.param("fc.bias".into(), Tensor::zeros(&[fan_out]), true);
        (weight, bias)
    }
}

fn conv_out(extent: usize, kernel: usize, stride: usize) -> usize {
    (extent + 2 * (kernel / 2) - kernel) / stride + 1
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model. Conv weights are He-normal (fan-in),
    /// BN scale 1 and shift 0, classifier weights uniform in
    /// `±1/sqrt(fan_in)` with zero bias.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            seed,
            params: Vec::new(),
            buffers: Vec::new(),
            hooks: Vec::new(),
        };
        let [in_ch, mut h, mut w] = spec.input_shape;
        let k = spec.width;
        let mut stem = None;
        let mut blocks = Vec::new();
        let channels;
        match spec.kind {
            ModelKind::ResNet => {
                stem = Some(b.conv_bn("stem", in_ch, 16, 3, 1, true));
                let mut ch = 16;
                for (stage, base) in [16usize, 32, 64].into_iter().enumerate() {
                    let out = base * k;
                    for blk in 0..spec.blocks_per_stage() {
                        let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                        let name = format!("s{}.b{}", stage + 1, blk);
                        let first = b.conv_bn(&format!("{name}.c1"), ch, out, 3, stride, true);
                        let second = b.conv_bn(&format!("{name}.c2"), out, out, 3, 1, true);
                        let shortcut = (stride != 1 || ch != out)
                            .then(|| b.conv_bn(&format!("{name}.short"), ch, out, 1, stride, false));
                        h = conv_out(h, 3, stride);
                        w = conv_out(w, 3, stride);
                        blocks.push(Block::Residual {
                            first,
                            second,
                            shortcut,
                        });
                        ch = out;
                    }
                }
                channels = ch;
            }
            ModelKind::PlainCnn => {
                let mut ch = in_ch;
                for i in 0..spec.depth {
                    let out = 16 * k * (1 << i.min(2));
                    let unit = b.conv_bn(&format!("l{i}"), ch, out, 3, 1, true);
                    let pool = i + 1 < spec.depth && h >= 4 && w >= 4;
                    if pool {
                        h /= 2;
                        w /= 2;
                    }
                    blocks.push(Block::Plain { unit, pool });
                    ch = out;
                }
                channels = ch;
            }
        }
        let fan_in = match spec.head {
            Head::GapLinear => channels,
            Head::FlattenLinear => channels * h * w,
        };
        let (fc_weight, fc_bias) = b.linear(fan_in, spec.num_classes);
        Ok(Model {
            spec: spec.clone(),
            params: b.params,
            buffers: b.buffers,
            stem,
            blocks,
            fc_weight,
            fc_bias,
            hooks: b.hooks,
            attached: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn hook_names(&self) -> &[String] {
        &self.hooks
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Element count of all conv weights.
    pub fn num_conv_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.ends_with(".conv.weight"))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Parameters followed by buffers, as `(name, tensor)` pairs.
    pub fn state(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(n, t)| (n.as_str(), t)))
            .collect()
    }

    /// Replaces every parameter and buffer with the tensor of the same name.
    pub fn load_state(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let find = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::BadCheckpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let mut params = self.params.clone();
        for p in &mut params {
            p.value = find(&p.name, p.value.shape())?;
        }
        let mut buffers = self.buffers.clone();
        for (name, t) in &mut buffers {
            *t = find(name, t.shape())?;
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    /// Flags for the hooks named by `placement`.
    pub fn hook_mask(&self, placement: &Placement) -> Result<Vec<bool>> {
        match placement {
            Placement::All => Ok(vec![true; self.hooks.len()]),
            Placement::Hooks(names) => {
                let mut mask = vec![false; self.hooks.len()];
                for name in names {
                    let i = self.hooks.iter().position(|h| h == name).ok_or_else(|| {
                        Error::key(
                            "reg.placement",
                            format!(
                                "unknown hook `{name}`; available hooks: {}",
                                self.hooks.join(", ")
                            ),
                        )
                    })?;
                    mask[i] = true;
                }
                Ok(mask)
            }
        }
    }

    /// Binds a regularizer to the hooks named in its placement. Only
    /// training forwards apply it.
    pub fn attach_regularizer(&mut self, config: &RegularizerConfig) -> Result<()> {
        config.validate()?;
        let mask = self.hook_mask(&config.placement)?;
        self.attached = Some(Attached {
            config: config.clone(),
            mask,
        });
        Ok(())
    }

    pub fn regularizer_config(&self) -> Option<&RegularizerConfig> {
        self.attached.as_ref().map(|a| &a.config)
    }

    /// Regularizer and hook mask for `epoch`, with any curriculum applied.
    pub fn regularizer_at(&self, epoch: usize, total_epochs: usize) -> Result<Option<(Regularizer, Vec<bool>)>> {
        let Some(att) = &self.attached else {
            return Ok(None);
        };
        let reg = Regularizer::new(&att.config.at_epoch(epoch, total_epochs))?;
        Ok(Some((reg, att.mask.clone())))
    }

    /// Records a forward pass. `bn_training` selects batch statistics (and
    /// returns updates for the running estimates); `transform`, when given,
    /// is applied at its flagged hooks.
    pub fn forward(
        &self,
        tape: &mut GradTape<T>,
        input: Var,
        bn_training: bool,
        transform: Option<&HookTransform<'_>>,
    ) -> Result<ForwardOut<T>> {
        let [c, h, w] = self.spec.input_shape;
        let x_shape = tape.try_value(input)?.shape().to_vec();
        if x_shape.len() != 4 || x_shape[1..] != [c, h, w] {
            return Err(Error::dim(format!(
                "model expects input [N, {c}, {h}, {w}], got {x_shape:?}"
            )));
        }
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect();
        let mut pass = Pass {
            model: self,
            pv: &pv,
            bn_training,
            transform,
            updates: Vec::new(),
        };
        let mut x = input;
        if let Some(stem) = &self.stem {
            x = pass.unit(tape, x, stem, true)?;
        }
        for block in &self.blocks {
            x = match block {
                Block::Plain { unit, pool } => {
                    let y = pass.unit(tape, x, unit, true)?;
                    if *pool {
                        tape.max_pool2d(y, 2, 2)?
                    } else {
                        y
                    }
                }
                Block::Residual {
                    first,
                    second,
                    shortcut,
                } => {
                    let y = pass.unit(tape, x, first, true)?;
                    let y = pass.unit(tape, y, second, false)?;
                    let skip = match shortcut {
                        Some(s) => pass.unit(tape, x, s, false)?,
                        None => x,
                    };
                    let sum = tape.add(y, skip)?;
                    let out = tape.relu(sum)?;
                    match (self.spec.hook_point, second.hook) {
                        (HookPoint::PostRelu, Some(hk)) => pass.hook(tape, out, hk, true)?,
                        _ => out,
                    }
                }
            };
        }
        let features = x;
        let pooled = match self.spec.head {
            Head::GapLinear => tape.global_avg_pool(features)?,
            Head::FlattenLinear => {
                let s = tape.value(features).shape().to_vec();
                tape.reshape(features, &[s[0], s[1] * s[2] * s[3]])?
            }
        };
        let logits = tape.linear(pooled, pv[self.fc_weight], pv[self.fc_bias])?;
        let bn_updates = pass.updates;
        Ok(ForwardOut {
            logits,
            features,
            params: pv,
            bn_updates,
        })
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        let m = T::of(crate::ops::BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            for (r, &b) in self.buffers[u.running_mean].1.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.buffers[u.running_var]
                .1
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var_unbiased)
            {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Evaluation-mode logits for a batch.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, false, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Classifier weights `[classes, C]` of a global-average-pool head.
    pub fn gap_classifier(&self) -> Result<&Tensor<T>> {
        if self.spec.head != Head::GapLinear {
            return Err(Error::Unsupported(
                "class activation maps need a global-average-pool classifier head".into(),
            ));
        }
        Ok(&self.params[self.fc_weight].value)
    }
}

struct Pass<'m, T: Scalar> {
    model: &'m Model<T>,
    pv: &'m [Var],
    bn_training: bool,
    transform: Option<&'m HookTransform<'m>>,
    updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Pass<'_, T> {
    /// conv → BN → [hook if post-BN] → [ReLU → hook if post-ReLU and `relu`].
    fn unit(&mut self, tape: &mut GradTape<T>, x: Var, u: &ConvBn, relu: bool) -> Result<Var> {
        let y = tape.conv2d(x, self.pv[u.weight], None, u.stride, u.pad)?;
        let (g, b) = (self.pv[u.gamma], self.pv[u.beta]);
        let mut y = if self.bn_training {
            let (y, stats) = tape.batchnorm2d_train(y, g, b)?;
            self.updates.push(BnUpdate {
                running_mean: u.running_mean,
                running_var: u.running_var,
                stats,
            });
            y
        } else {
            let bufs = &self.model.buffers;
            tape.batchnorm2d_eval(y, g, b, &bufs[u.running_mean].1, &bufs[u.running_var].1)?
        };
        let post_relu = self.model.spec.hook_point == HookPoint::PostRelu;
        if let (false, Some(hk)) = (post_relu, u.hook) {
            y = self.hook(tape, y, hk, false)?;
        }
        if relu {
            y = tape.relu(y)?;
            if let (true, Some(hk)) = (post_relu, u.hook) {
                y = self.hook(tape, y, hk, true)?;
            }
        }
        Ok(y)
    }

    fn hook(&mut self, tape: &mut GradTape<T>, x: Var, hook: usize, post_relu: bool) -> Result<Var> {
        let Some(tr) = self.transform else {
            return Ok(x);
        };
        if !tr.mask.get(hook).copied().unwrap_or(false) {
            return Ok(x);
        }
        let n = tape.value(x).shape()[0];
        let mut rngs = tr.key.layer(hook as u64).sample_streams(n);
        match tr.regularizer.factors(tape.value(x), &mut rngs, true, post_relu)? {
            BatchFactors::Identity => Ok(x),
            BatchFactors::PerMap(f) => tape.scale_channels(x, f.into_iter().map(T::of).collect()),
            BatchFactors::PerElement(f) => tape.mask(x, f.into_iter().map(T::of).collect()),
        }
    }
}
