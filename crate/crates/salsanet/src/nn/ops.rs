//! Convolution, pooling, normalization, activation and dropout layers.
//!
//! Each layer has a forward function and a matching backward function that
//! consumes whatever the forward saved (or simply re-derives it from the
//! inputs). Convolutions are lowered to matrix products via im2col; the
//! accumulation-heavy statistics (batch norm, softmax) run in f64
//! internally and store f32.

use rand::Rng;

use super::matmul::{matmul_acc, matmul_nt, transpose};
use super::tensor::Tensor;
use super::NnError;

/// Batch-norm variance stabilizer.
pub const BN_EPS: f32 = 1e-5;
/// Leaky-ReLU negative slope used throughout the network.
pub const LEAKY_SLOPE: f32 = 0.1;
/// Batch-norm running-statistics momentum: `running = m*running + (1-m)*batch`.
pub const BN_MOMENTUM: f32 = 0.99;

/// Whether stochastic layers (dropout) and batch statistics are live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Learnable and running state of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    /// Fresh parameters: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: Tensor::from_vec(&[channels], vec![1.0; channels]).expect("static shape"),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![1.0; channels]).expect("static shape"),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch statistics saved by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Argmax bookkeeping from max-pooling.
#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<u32>,
    input_dims: [usize; 4],
}

/// Per-element keep/scale factors from a training-mode dropout pass.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    scale: Vec<f32>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> NnError {
    NnError::Shape(format!("{what}: {a:?} vs {b:?}"))
}

/// Output spatial extent of a convolution, or an error when the geometry
/// does not tile evenly.
fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, NnError> {
    if stride == 0 {
        return Err(NnError::Parameter("stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(NnError::Shape(format!(
            "kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(NnError::Shape(format!(
            "extent {input} with pad {pad}, kernel {kernel}, stride {stride} does not tile"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unrolls one sample's patches into `cols[c*kh*kw][oh*ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    sample: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f32],
) {
    let ohw = oh * ow;
    for cc in 0..c {
        let plane = &sample[cc * h * w..(cc + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (cc * kh + ki) * kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (oj, out) in dst_row.iter_mut().enumerate() {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        *out = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the
/// sample gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    sample: &mut [f32],
) {
    let ohw = oh * ow;
    for cc in 0..c {
        let plane = &mut sample[cc * h * w..(cc + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (cc * kh + ki) * kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for (oj, &g) in src[oi * ow..(oi + 1) * ow].iter().enumerate() {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation plus per-output-channel bias.
///
/// `input` is [N,C,H,W], `weight` [K,C,kh,kw], `bias` [K]; the output is
/// [N,K,H',W'] with H' = (H + 2 pad - kh)/stride + 1.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, NnError> {
    let (n, c, h, w) = input.dims4()?;
    let (k, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(shape_err("conv2d channels", input.dims(), weight.dims()));
    }
    if bias.dims() != [k] {
        return Err(shape_err("conv2d bias", bias.dims(), weight.dims()));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    let mut cols = vec![0.0f32; ckk * ohw];
    for ni in 0..n {
        let sample = &input.data()[ni * c * h * w..(ni + 1) * c * h * w];
        im2col(sample, (c, h, w), (kh, kw), stride, pad, (oh, ow), &mut cols);
        let out_n = &mut out.data_mut()[ni * k * ohw..(ni + 1) * k * ohw];
        matmul_acc(out_n, weight.data(), &cols, k, ckk, ohw);
        for kk in 0..k {
            let b = bias.data()[kk];
            for v in &mut out_n[kk * ohw..(kk + 1) * ohw] {
                *v += b;
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (n, c, h, w) = input.dims4()?;
    let (k, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(shape_err("conv2d channels", input.dims(), weight.dims()));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    if grad_out.dims() != [n, k, oh, ow] {
        return Err(shape_err(
            "conv2d grad_out",
            grad_out.dims(),
            &[n, k, oh, ow],
        ));
    }
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    let mut grad_weight = Tensor::zeros(&[k, c, kh, kw]);
    let mut grad_bias = Tensor::zeros(&[k]);

    // grad_bias: sum of grad_out over batch and space.
    for ni in 0..n {
        for kk in 0..k {
            let go = &grad_out.data()[(ni * k + kk) * ohw..(ni * k + kk + 1) * ohw];
            let mut s = 0.0f64;
            for &g in go {
                s += g as f64;
            }
            grad_bias.data_mut()[kk] += s as f32;
        }
    }

    let mut cols = vec![0.0f32; ckk * ohw];
    let mut grad_cols = vec![0.0f32; ckk * ohw];
    let mut weight_t = vec![0.0f32; k * ckk];
    transpose(&mut weight_t, weight.data(), k, ckk);
    for ni in 0..n {
        let sample = &input.data()[ni * c * h * w..(ni + 1) * c * h * w];
        im2col(sample, (c, h, w), (kh, kw), stride, pad, (oh, ow), &mut cols);
        let go_n = &grad_out.data()[ni * k * ohw..(ni + 1) * k * ohw];
        // dW += dY * cols^T
        matmul_nt(grad_weight.data_mut(), go_n, &cols, k, ohw, ckk);
        // dCols = W^T * dY
        grad_cols.iter_mut().for_each(|v| *v = 0.0);
        matmul_acc(&mut grad_cols, &weight_t, go_n, ckk, k, ohw);
        let gi_n = &mut grad_input.data_mut()[ni * c * h * w..(ni + 1) * c * h * w];
        col2im(&grad_cols, (c, h, w), (kh, kw), stride, pad, (oh, ow), gi_n);
    }
    debug_assert!(grad_input.all_finite() && grad_weight.all_finite() && grad_bias.all_finite());
    Ok((grad_input, grad_weight, grad_bias))
}

/// Transposed convolution with kernel 2, stride 2: exact x2 upsampling.
///
/// `input` is [N,C,H,W], `weight` [C,K,2,2]; each input element scatters
/// `weight * value` into its own disjoint 2x2 block of the [N,K,2H,2W]
/// output. No bias — in this network a deconv output always flows into a
/// skip addition followed by convolutions.
pub fn transposed_conv2d(input: &Tensor, weight: &Tensor) -> Result<Tensor, NnError> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, k, kh, kw) = weight.dims4()?;
    if wc != c || kh != 2 || kw != 2 {
        return Err(shape_err(
            "transposed_conv2d weight",
            weight.dims(),
            &[c, k, 2, 2],
        ));
    }
    let hw = h * w;
    // Permute weight to rows of (k, i, j) over columns of c.
    let mut wperm = vec![0.0f32; k * 4 * c];
    for cc in 0..c {
        for kk in 0..k {
            for i in 0..2 {
                for j in 0..2 {
                    wperm[((kk * 2 + i) * 2 + j) * c + cc] = weight.data()[((cc * k + kk) * 2 + i) * 2 + j];
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[n, k, 2 * h, 2 * w]);
    let mut prod = vec![0.0f32; k * 4 * hw];
    for ni in 0..n {
        let in_n = &input.data()[ni * c * hw..(ni + 1) * c * hw];
        prod.iter_mut().for_each(|v| *v = 0.0);
        matmul_acc(&mut prod, &wperm, in_n, k * 4, c, hw);
        let out_n = &mut out.data_mut()[ni * k * 4 * hw..(ni + 1) * k * 4 * hw];
        for kk in 0..k {
            for i in 0..2 {
                for j in 0..2 {
                    let src = &prod[((kk * 2 + i) * 2 + j) * hw..((kk * 2 + i) * 2 + j + 1) * hw];
                    for hh in 0..h {
                        let dst_base = kk * (2 * h) * (2 * w) + (2 * hh + i) * (2 * w) + j;
                        for ww in 0..w {
                            out_n[dst_base + 2 * ww] = src[hh * w + ww];
                        }
                    }
                }
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Gradients of [`transposed_conv2d`] with respect to input and weight.
pub fn transposed_conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
) -> Result<(Tensor, Tensor), NnError> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, k, kh, kw) = weight.dims4()?;
    if wc != c || kh != 2 || kw != 2 {
        return Err(shape_err(
            "transposed_conv2d weight",
            weight.dims(),
            &[c, k, 2, 2],
        ));
    }
    if grad_out.dims() != [n, k, 2 * h, 2 * w] {
        return Err(shape_err(
            "transposed_conv2d grad_out",
            grad_out.dims(),
            &[n, k, 2 * h, 2 * w],
        ));
    }
    let hw = h * w;
    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    let mut grad_weight = Tensor::zeros(&[c, k, 2, 2]);
    // wperm rows (k,i,j) x cols c, as in the forward pass.
    let mut wperm = vec![0.0f32; k * 4 * c];
    for cc in 0..c {
        for kk in 0..k {
            for i in 0..2 {
                for j in 0..2 {
                    wperm[((kk * 2 + i) * 2 + j) * c + cc] =
                        weight.data()[((cc * k + kk) * 2 + i) * 2 + j];
                }
            }
        }
    }
    let mut wperm_t = vec![0.0f32; c * k * 4];
    transpose(&mut wperm_t, &wperm, k * 4, c);
    let mut gcols = vec![0.0f32; k * 4 * hw];
    let mut gwperm = vec![0.0f32; k * 4 * c];
    for ni in 0..n {
        // Gather the strided output gradient into (k,i,j) x (h*w) rows.
        let go_n = &grad_out.data()[ni * k * 4 * hw..(ni + 1) * k * 4 * hw];
        for kk in 0..k {
            for i in 0..2 {
                for j in 0..2 {
                    let dst = &mut gcols[((kk * 2 + i) * 2 + j) * hw..((kk * 2 + i) * 2 + j + 1) * hw];
                    for hh in 0..h {
                        let src_base = kk * (2 * h) * (2 * w) + (2 * hh + i) * (2 * w) + j;
                        for ww in 0..w {
                            dst[hh * w + ww] = go_n[src_base + 2 * ww];
                        }
                    }
                }
            }
        }
        // dX = wperm^T * gcols
        let gi_n = &mut grad_input.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        matmul_acc(gi_n, &wperm_t, &gcols, c, k * 4, hw);
        // dWperm += gcols * X^T
        let in_n = &input.data()[ni * c * hw..(ni + 1) * c * hw];
        matmul_nt(&mut gwperm, &gcols, in_n, k * 4, hw, c);
    }
    // Un-permute the weight gradient.
    for cc in 0..c {
        for kk in 0..k {
            for i in 0..2 {
                for j in 0..2 {
                    grad_weight.data_mut()[((cc * k + kk) * 2 + i) * 2 + j] =
                        gwperm[((kk * 2 + i) * 2 + j) * c + cc];
                }
            }
        }
    }
    debug_assert!(grad_input.all_finite() && grad_weight.all_finite());
    Ok((grad_input, grad_weight))
}

/// Batch normalization over the channel axis of an [N,C,H,W] tensor.
///
/// Train mode normalizes with batch statistics (biased variance), scales
/// by gamma, shifts by beta, and folds the batch statistics into the
/// running estimates with [`BN_MOMENTUM`]-style mixing; it returns the
/// cache the backward pass needs. Infer mode normalizes with the running
/// statistics and returns no cache.
pub fn batch_norm(
    input: &Tensor,
    params: &mut BatchNormParams,
    mode: Mode,
    momentum: f32,
) -> Result<(Tensor, Option<BnCache>), NnError> {
    let (n, c, h, w) = input.dims4()?;
    if params.channels() != c {
        return Err(shape_err(
            "batch_norm channels",
            input.dims(),
            params.gamma.dims(),
        ));
    }
    let m = n * h * w;
    let hw = h * w;
    match mode {
        Mode::Train => {
            if m < 2 {
                return Err(NnError::DegenerateBatch { per_channel: m });
            }
            let mut out = Tensor::zeros(&[n, c, h, w]);
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for cc in 0..c {
                let mut s = 0.0f64;
                for ni in 0..n {
                    let plane = &input.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
                    for &v in plane {
                        s += v as f64;
                    }
                }
                let mu = s / m as f64;
                let mut s2 = 0.0f64;
                for ni in 0..n {
                    let plane = &input.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
                    for &v in plane {
                        let d = v as f64 - mu;
                        s2 += d * d;
                    }
                }
                mean[cc] = mu;
                var[cc] = s2 / m as f64;
            }
            for cc in 0..c {
                let inv = 1.0 / (var[cc] + BN_EPS as f64).sqrt();
                let g = params.gamma.data()[cc] as f64;
                let b = params.beta.data()[cc] as f64;
                for ni in 0..n {
                    let src = &input.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
                    let dst = &mut out.data_mut()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = (g * (v as f64 - mean[cc]) * inv + b) as f32;
                    }
                }
                let rm = &mut params.running_mean.data_mut()[cc];
                *rm = momentum * *rm + (1.0 - momentum) * mean[cc] as f32;
                let rv = &mut params.running_var.data_mut()[cc];
                *rv = momentum * *rv + (1.0 - momentum) * var[cc] as f32;
            }
            debug_assert!(out.all_finite());
            Ok((out, Some(BnCache { mean, var })))
        }
        Mode::Infer => Ok((batch_norm_infer(input, params)?, None)),
    }
}

/// Inference-mode batch norm against immutable parameters. Equivalent to
/// [`batch_norm`] in [`Mode::Infer`] but usable behind a shared reference.
pub fn batch_norm_infer(input: &Tensor, params: &BatchNormParams) -> Result<Tensor, NnError> {
    let (n, c, h, w) = input.dims4()?;
    if params.channels() != c {
        return Err(shape_err(
            "batch_norm channels",
            input.dims(),
            params.gamma.dims(),
        ));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for cc in 0..c {
        let inv = 1.0 / (params.running_var.data()[cc] as f64 + BN_EPS as f64).sqrt();
        let mu = params.running_mean.data()[cc] as f64;
        let g = params.gamma.data()[cc] as f64;
        let b = params.beta.data()[cc] as f64;
        for ni in 0..n {
            let src = &input.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
            let dst = &mut out.data_mut()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (g * (v as f64 - mu) * inv + b) as f32;
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Gradients of training-mode [`batch_norm`]: (grad_input, grad_gamma,
/// grad_beta).
pub fn batch_norm_backward(
    grad_out: &Tensor,
    input: &Tensor,
    gamma: &Tensor,
    cache: &BnCache,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (n, c, h, w) = input.dims4()?;
    if grad_out.dims() != input.dims() {
        return Err(shape_err("batch_norm grad_out", grad_out.dims(), input.dims()));
    }
    if gamma.dims() != [c] || cache.mean.len() != c {
        return Err(shape_err("batch_norm gamma", gamma.dims(), &[c]));
    }
    let m = (n * h * w) as f64;
    let hw = h * w;
    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for cc in 0..c {
        let mu = cache.mean[cc];
        let inv = 1.0 / (cache.var[cc] + BN_EPS as f64).sqrt();
        let g = gamma.data()[cc] as f64;
        // s1 = sum dy, s2 = sum dy * x_hat
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for ni in 0..n {
            let x = &input.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
            let dy = &grad_out.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
            for (&xv, &dv) in x.iter().zip(dy) {
                let xh = (xv as f64 - mu) * inv;
                s1 += dv as f64;
                s2 += dv as f64 * xh;
            }
        }
        grad_gamma.data_mut()[cc] = s2 as f32;
        grad_beta.data_mut()[cc] = s1 as f32;
        let k1 = s1 / m;
        let k2 = s2 / m;
        for ni in 0..n {
            let x = &input.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
            let dy = &grad_out.data()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
            let gi = &mut grad_input.data_mut()[(ni * c + cc) * hw..(ni * c + cc + 1) * hw];
            for ((o, &xv), &dv) in gi.iter_mut().zip(x).zip(dy) {
                let xh = (xv as f64 - mu) * inv;
                *o = (g * inv * (dv as f64 - k1 - xh * k2)) as f32;
            }
        }
    }
    debug_assert!(grad_input.all_finite());
    Ok((grad_input, grad_gamma, grad_beta))
}

/// x if x > 0, else slope * x, elementwise.
pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    Tensor::from_vec(input.dims(), data).expect("same shape")
}

/// Gradient of [`leaky_relu`]; the kink at zero uses the negative-side
/// derivative.
pub fn leaky_relu_backward(
    grad_out: &Tensor,
    input: &Tensor,
    slope: f32,
) -> Result<Tensor, NnError> {
    if grad_out.dims() != input.dims() {
        return Err(shape_err("leaky_relu grad_out", grad_out.dims(), input.dims()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { slope * g })
        .collect();
    Ok(Tensor::from_vec(input.dims(), data).expect("same shape"))
}

/// 2x2 max pooling with stride 2. H and W must be even.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, PoolCache), NnError> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::Shape(format!(
            "max_pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &input.data()[nc * h * w..(nc + 1) * h * w];
        let out_plane = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                // First maximum in scan order wins ties.
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (2 * oi + di) * w + (2 * oj + dj);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_plane[oi * ow + oj] = best;
                argmax[nc * oh * ow + oi * ow + oj] = (nc * h * w + best_idx) as u32;
            }
        }
    }
    Ok((
        out,
        PoolCache {
            argmax,
            input_dims: [n, c, h, w],
        },
    ))
}

/// Routes each output gradient to the input element that produced the max.
pub fn max_pool2_backward(grad_out: &Tensor, cache: &PoolCache) -> Result<Tensor, NnError> {
    let [n, c, h, w] = cache.input_dims;
    if grad_out.dims() != [n, c, h / 2, w / 2] {
        return Err(shape_err(
            "max_pool2 grad_out",
            grad_out.dims(),
            &[n, c, h / 2, w / 2],
        ));
    }
    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    for (&g, &idx) in grad_out.data().iter().zip(&cache.argmax) {
        grad_input.data_mut()[idx as usize] += g;
    }
    Ok(grad_input)
}

/// Inverted dropout. Train mode zeroes each element with probability `p`
/// and scales survivors by 1/(1-p) so the expectation is unchanged; Infer
/// mode is the identity and draws nothing from the RNG. `p` must be in
/// [0, 1); `p == 0` is the identity and also draws nothing.
pub fn dropout<R: Rng>(
    input: &Tensor,
    p: f32,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor, Option<DropoutMask>), NnError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::Parameter(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mut scale = Vec::with_capacity(input.len());
    for _ in 0..input.len() {
        let u: f32 = rng.gen();
        scale.push(if u < p { 0.0 } else { keep_scale });
    }
    let data = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| v * s)
        .collect();
    let out = Tensor::from_vec(input.dims(), data).expect("same shape");
    Ok((out, Some(DropoutMask { scale })))
}

/// Gradient of a training-mode [`dropout`] pass.
pub fn dropout_backward(grad_out: &Tensor, mask: &DropoutMask) -> Result<Tensor, NnError> {
    if grad_out.len() != mask.scale.len() {
        return Err(NnError::Shape(format!(
            "dropout grad len {} vs mask len {}",
            grad_out.len(),
            mask.scale.len()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.scale)
        .map(|(&g, &s)| g * s)
        .collect();
    Ok(Tensor::from_vec(grad_out.dims(), data).expect("same shape"))
}

/// Per-pixel softmax over the channel axis of an [N,K,H,W] tensor, with
/// max subtraction for stability. Accumulates in f64.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor, NnError> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, k, h, w]);
    for ni in 0..n {
        for px in 0..hw {
            let mut maxv = f64::NEG_INFINITY;
            for kk in 0..k {
                maxv = maxv.max(logits.data()[(ni * k + kk) * hw + px] as f64);
            }
            let mut sum = 0.0f64;
            for kk in 0..k {
                let e = ((logits.data()[(ni * k + kk) * hw + px] as f64) - maxv).exp();
                out.data_mut()[(ni * k + kk) * hw + px] = e as f32;
                sum += e;
            }
            for kk in 0..k {
                let idx = (ni * k + kk) * hw + px;
                out.data_mut()[idx] = ((out.data()[idx] as f64) / sum) as f32;
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}
