//! Forward and backward kernels.
//!
//! These are plain functions over [`Tensor`]s with no recording; the
//! [`GradTape`](crate::tape::GradTape) calls them and keeps whatever each
//! backward rule needs. All reductions run in a fixed sequential order so the
//! results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// Dense helpers

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [channels, height, width] = input;
        let [kernel_h, kernel_w] = kernel;
        if stride == 0 {
            return Err(Error::config("convolution stride must be at least 1"));
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if kernel_h > ph || kernel_w > pw {
            return Err(Error::config(format!(
                "kernel {kernel_h}x{kernel_w} exceeds padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one sample `[C,H,W]` into a `[C·kh·kw, H'·W']` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut col[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.out_w + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                x[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back into `[C,H,W]`.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &col[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            x[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let [n, c, h, w] = input.dims4()?;
    let [k, wc, kh, kw] = weight.dims4().map_err(|_| {
        Error::dim(format!(
            "conv weight must be [K,C,kh,kw], got {:?}",
            weight.shape()
        ))
    })?;
    if wc != c {
        return Err(Error::dim(format!(
            "conv input has {c} channels but weight expects {wc}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::dim(format!(
                "conv bias must have shape [{k}], got {:?}",
                b.shape()
            )));
        }
    }
    Ok((n, k, ConvGeometry::new([c, h, w], [kh, kw], stride, pad)?))
}

/// Cross-correlation of `input [N,C,H,W]` with `weight [K,C,kh,kw]` plus an
/// optional per-filter bias. Output extents are `floor((H + 2·pad − kh) /
/// stride) + 1`. No activation is applied.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, k, g) = conv_shapes(input, weight, bias, stride, pad)?;
    let (pl, ol) = (g.patch_len(), g.out_len());
    let mut out = Tensor::zeros(&[n, k, g.out_h, g.out_w]);
    let mut col = vec![T::zero(); pl * ol];
    for s in 0..n {
        g.im2col(input.sample(s), &mut col);
        let dst = &mut out.data_mut()[s * k * ol..(s + 1) * k * ol];
        if let Some(b) = bias {
            for (kk, row) in dst.chunks_mut(ol).enumerate() {
                row.fill(b.data()[kk]);
            }
        }
        gemm_nn(k, pl, ol, weight.data(), &col, dst);
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient. `saved_input`
/// is the activation recorded at forward time.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved_input: Option<&Tensor<T>>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let input = saved_input.ok_or_else(|| {
        Error::TapeCorruption("conv2d backward has no saved input activation".into())
    })?;
    let (n, k, g) = conv_shapes(input, weight, None, stride, pad)?;
    if grad_out.shape() != [n, k, g.out_h, g.out_w] {
        return Err(Error::dim(format!(
            "conv grad_out shape {:?} does not match forward output [{n}, {k}, {}, {}]",
            grad_out.shape(),
            g.out_h,
            g.out_w
        )));
    }
    let (pl, ol) = (g.patch_len(), g.out_len());
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[k]);
    let mut col = vec![T::zero(); pl * ol];
    let mut gcol = vec![T::zero(); pl * ol];
    let sample_in = g.channels * g.height * g.width;
    for s in 0..n {
        let go = &grad_out.data()[s * k * ol..(s + 1) * k * ol];
        for (kk, row) in go.chunks(ol).enumerate() {
            let mut acc = T::zero();
            for &v in row {
                acc += v;
            }
            gb.data_mut()[kk] += acc;
        }
        g.im2col(input.sample(s), &mut col);
        gemm_nt(k, ol, pl, go, &col, gw.data_mut());
        gcol.fill(T::zero());
        gemm_tn(pl, k, ol, weight.data(), go, &mut gcol);
        g.col2im(&gcol, &mut gi.data_mut()[s * sample_in..(s + 1) * sample_in]);
    }
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// Pointwise

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(saved_input.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Pooling

/// Max pooling with a square window. Returns the output and, for each output
/// element, the flat input index of the winning element (first maximum in
/// scan order).
pub fn max_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::config("pool window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(Error::config(format!(
            "pool window {window} exceeds spatial extent {h}x{w}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    for (&gv, &i) in grad_out.data().iter().zip(argmax) {
        g.data_mut()[i] += gv;
    }
    g
}

/// Mean over the spatial axes: `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|m| m.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::of(1.0 / hw as f64);
    let mut g = Tensor::zeros(input_shape);
    for (map, &gv) in g.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        map.fill(gv * inv);
    }
    g
}

// ---------------------------------------------------------------------------
// Fully connected

/// `y = x · Wᵀ + b` with `x [N,in]`, `W [out,in]`, `b [out]`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, fan_in] = x.dims2()?;
    let [fan_out, w_in] = weight.dims2()?;
    if w_in != fan_in {
        return Err(Error::dim(format!(
            "linear input has {fan_in} features but weight expects {w_in}"
        )));
    }
    if bias.shape() != [fan_out] {
        return Err(Error::dim(format!(
            "linear bias must have shape [{fan_out}], got {:?}",
            bias.shape()
        )));
    }
    let mut y = Tensor::zeros(&[n, fan_out]);
    for row in y.data_mut().chunks_mut(fan_out) {
        row.copy_from_slice(bias.data());
    }
    gemm_nt(n, fan_in, fan_out, x.data(), weight.data(), y.data_mut());
    Ok(y)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let [n, fan_in] = x.dims2()?;
    let [fan_out, _] = weight.dims2()?;
    if grad_out.shape() != [n, fan_out] {
        return Err(Error::dim("linear grad_out shape mismatch"));
    }
    let mut gi = Tensor::zeros(&[n, fan_in]);
    gemm_nn(n, fan_out, fan_in, grad_out.data(), weight.data(), gi.data_mut());
    let mut gw = Tensor::zeros(&[fan_out, fan_in]);
    gemm_tn(fan_out, n, fan_in, grad_out.data(), x.data(), gw.data_mut());
    let mut gb = Tensor::zeros(&[fan_out]);
    for row in grad_out.data().chunks(fan_out) {
        for (b, &g) in gb.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(LinearGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Values kept from a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "batchnorm over {c} channels needs gamma/beta of shape [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(dims)
}

/// Training-mode batch norm using batch statistics over `N, H, W`.
pub fn batchnorm2d_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let [n, c, h, w] = bn_check(x, gamma, beta)?;
    let hw = h * w;
    let m = n * hw;
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for &v in &xd[off..off + hw] {
                s += v;
            }
        }
        let mu = s / T::of(m as f64);
        let mut ss = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for &v in &xd[off..off + hw] {
                ss += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = ss;
    }
    let eps = T::of(BN_EPS);
    let inv_std: Vec<T> = var
        .iter()
        .map(|&ss| T::one() / (ss / T::of(m as f64) + eps).sqrt())
        .collect();
    let var_unbiased = var
        .iter()
        .map(|&ss| ss / T::of(m.saturating_sub(1).max(1) as f64))
        .collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (g, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in off..off + hw {
                let xh = (xd[i] - mu) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok((
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            mean,
            var_unbiased,
        },
    ))
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm2d_train_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> Result<BatchNormGrads<T>> {
    let [n, c, h, w] = grad_out.dims4()?;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let gd = grad_out.data();
    let xh = saved.xhat.data();
    let mut gg = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sg += gd[i];
                sgx += gd[i] * xh[i];
            }
        }
        gbeta.data_mut()[ch] = sg;
        gg.data_mut()[ch] = sgx;
    }
    let mut gi = Tensor::zeros(grad_out.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let k = gamma.data()[ch] * saved.inv_std[ch] / m;
            let (sg, sgx) = (gbeta.data()[ch], gg.data()[ch]);
            for i in off..off + hw {
                gi.data_mut()[i] = k * (m * gd[i] - sg - xh[i] * sgx);
            }
        }
    }
    Ok(BatchNormGrads {
        input: gi,
        gamma: gg,
        beta: gbeta,
    })
}

/// Evaluation-mode batch norm with fixed statistics.
pub fn batchnorm2d_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = bn_check(x, gamma, beta)?;
    let hw = h * w;
    let eps = T::of(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let is = T::one() / (running_var.data()[ch] + eps).sqrt();
            let (g, bt, mu) = (gamma.data()[ch], beta.data()[ch], running_mean.data()[ch]);
            for i in off..off + hw {
                y.data_mut()[i] = g * ((x.data()[i] - mu) * is) + bt;
            }
        }
    }
    Ok(y)
}

pub fn batchnorm2d_eval_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let [n, c, h, w] = grad_out.dims4()?;
    let hw = h * w;
    let eps = T::of(BN_EPS);
    let mut gi = Tensor::zeros(grad_out.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let is = T::one() / (running_var.data()[ch] + eps).sqrt();
            let mu = running_mean.data()[ch];
            for i in off..off + hw {
                let g = grad_out.data()[i];
                gi.data_mut()[i] = g * gamma.data()[ch] * is;
                gg.data_mut()[ch] += g * (x.data()[i] - mu) * is;
                gbeta.data_mut()[ch] += g;
            }
        }
    }
    Ok(BatchNormGrads {
        input: gi,
        gamma: gg,
        beta: gbeta,
    })
}

// ---------------------------------------------------------------------------
// Loss

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// softmax probabilities.
pub fn softmax_cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::dim(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut total = T::zero();
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let p = &mut probs.data_mut()[i * k..(i + 1) * k];
        for (pv, &v) in p.iter_mut().zip(row) {
            *pv = (v - max).exp() / z;
        }
        total += z.ln() + max - row[labels[i]];
    }
    Ok((total / T::of(n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    grad_loss: T,
    probs: &Tensor<T>,
    labels: &[usize],
) -> Tensor<T> {
    let k = probs.shape()[1];
    let n = labels.len();
    let scale = grad_loss / T::of(n as f64);
    let mut g = probs.clone();
    for (i, row) in g.data_mut().chunks_mut(k).enumerate() {
        row[labels[i]] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    g
}
