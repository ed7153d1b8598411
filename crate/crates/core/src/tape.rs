//! Reverse-mode gradient tape.
//!
//! Every call on [`GradTape`] evaluates one op eagerly, appends a node, and
//! returns a [`Var`] handle. [`GradTape::backward`] walks the nodes in reverse
//! recording order, so each recorded op is visited once.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormSaved};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<T>,
        var: Tensor<T>,
    },
    Add(Var, Var),
    /// One constant factor per `(sample, channel)` map.
    ScaleChannels {
        input: Var,
        factors: Vec<T>,
    },
    /// One constant factor per element.
    Mask {
        input: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct GradTape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or_else(|| {
            Error::TapeCorruption(format!(
                "var {} is not recorded on this tape ({} nodes)",
                v.0,
                self.nodes.len()
            ))
        })
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let b = match bias {
            Some(b) => Some(self.try_value(b)?),
            None => None,
        };
        let y = ops::conv2d_forward(self.try_value(input)?, self.try_value(weight)?, b, stride, pad)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let y = ops::relu_forward(self.try_value(input)?);
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::Relu(input), rg))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d_forward(self.try_value(input)?, window, stride)?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::MaxPool { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let y = ops::global_avg_pool_forward(self.try_value(input)?)?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::GlobalAvgPool(input), rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::linear_forward(
            self.try_value(input)?,
            self.try_value(weight)?,
            self.try_value(bias)?,
        )?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            y,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Training-mode batch norm. Returns the output and the batch statistics
    /// so the caller can update running estimates.
    pub fn batchnorm2d_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let (y, saved) = ops::batchnorm2d_train_forward(
            self.try_value(input)?,
            self.try_value(gamma)?,
            self.try_value(beta)?,
        )?;
        let stats = BatchStats {
            mean: saved.mean.clone(),
            var_unbiased: saved.var_unbiased.clone(),
        };
        let rg = self.needs(&[input, gamma, beta]);
        let v = self.push(
            y,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn batchnorm2d_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
    ) -> Result<Var> {
        let y = ops::batchnorm2d_eval_forward(
            self.try_value(input)?,
            self.try_value(gamma)?,
            self.try_value(beta)?,
            mean,
            var,
        )?;
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.try_value(a)?, self.try_value(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "add of mismatched shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let y = Tensor::new(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
        )?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Multiplies each `(sample, channel)` map of an `[N,C,H,W]` value by a
    /// constant factor. Factors do not receive gradients.
    pub fn scale_channels(&mut self, input: Var, factors: Vec<T>) -> Result<Var> {
        let x = self.try_value(input)?;
        let [n, c, h, w] = x.dims4()?;
        if factors.len() != n * c {
            return Err(Error::dim(format!(
                "{} channel factors for {n}x{c} maps",
                factors.len()
            )));
        }
        let hw = h * w;
        let mut y = x.clone();
        for (map, &f) in y.data_mut().chunks_mut(hw).zip(&factors) {
            for v in map {
                *v *= f;
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::ScaleChannels { input, factors }, rg))
    }

    /// Elementwise product with a constant mask of the same size.
    pub fn mask(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.try_value(input)?;
        if mask.len() != x.numel() {
            return Err(Error::dim(format!(
                "mask of {} elements for a tensor of {}",
                mask.len(),
                x.numel()
            )));
        }
        let y = Tensor::new(
            x.shape(),
            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::Mask { input, mask }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let y = self.try_value(input)?.clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::Reshape(input), rg))
    }

    /// Mean cross-entropy loss; the result is a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy_forward(self.try_value(logits)?, labels)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::new(&[1], vec![loss])?,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` back to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let saved = self.nodes.get(input.0).map(|n| &n.value);
                let cg = ops::conv2d_backward(g, saved, &self.node(*weight)?.value, *stride, *pad)?;
                self.accumulate(grads, *input, cg.input);
                self.accumulate(grads, *weight, cg.weight);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias);
                }
            }
            Op::Relu(input) => {
                let gi = ops::relu_backward(g, &self.node(*input)?.value);
                self.accumulate(grads, *input, gi);
            }
            Op::MaxPool { input, argmax } => {
                let shape = self.node(*input)?.value.shape();
                let gi = ops::max_pool2d_backward(g, argmax, shape);
                self.accumulate(grads, *input, gi);
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.node(*input)?.value.shape();
                let gi = ops::global_avg_pool_backward(g, shape);
                self.accumulate(grads, *input, gi);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let lg =
                    ops::linear_backward(g, &self.node(*input)?.value, &self.node(*weight)?.value)?;
                self.accumulate(grads, *input, lg.input);
                self.accumulate(grads, *weight, lg.weight);
                self.accumulate(grads, *bias, lg.bias);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            } => {
                let bg = ops::batchnorm2d_train_backward(g, &self.node(*gamma)?.value, saved)?;
                self.accumulate(grads, *input, bg.input);
                self.accumulate(grads, *gamma, bg.gamma);
                self.accumulate(grads, *beta, bg.beta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                var,
            } => {
                let bg = ops::batchnorm2d_eval_backward(
                    g,
                    &self.node(*input)?.value,
                    &self.node(*gamma)?.value,
                    mean,
                    var,
                )?;
                self.accumulate(grads, *input, bg.input);
                self.accumulate(grads, *gamma, bg.gamma);
                self.accumulate(grads, *beta, bg.beta);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::ScaleChannels { input, factors } => {
                let hw = g.numel() / factors.len();
                let mut gi = g.clone();
                for (map, &f) in gi.data_mut().chunks_mut(hw).zip(factors) {
                    for v in map {
                        *v *= f;
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Mask { input, mask } => {
                let mut gi = g.clone();
                for (v, &m) in gi.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Reshape(input) => {
                let shape = self.node(*input)?.value.shape().to_vec();
                self.accumulate(grads, *input, g.clone().reshape(&shape)?);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gi = ops::softmax_cross_entropy_backward(g.data()[0], probs, labels);
                self.accumulate(grads, *logits, gi);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
