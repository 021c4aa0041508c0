//! Shared helpers for the integration suites: an f64 reference engine
//! for finite-difference gradient checks, straight-line projection
//! oracles, and synthetic dataset builders.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salsanet::nn::network::BlockParams;
use salsanet::nn::ops::{self, BatchNormParams, Mode, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
use salsanet::nn::Tensor;
use salsanet::pointcloud::{Point, PointCloud};
use salsanet::projection::{
    BevSpec, GridBinning, GridImage, GridKind, LabelGrid, SfvSpec, BEV_COUNT, BEV_MAX_Z,
    BEV_MEAN_INTENSITY, BEV_MEAN_Z, SFV_INTENSITY, SFV_MASK, SFV_RANGE, SFV_X, SFV_Y, SFV_Z,
};
use salsanet::training::weighted_ce_loss;
use salsanet::ClassId;

/// Central-difference step used by every gradient check.
pub const FD_H: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor in (-amp, amp).
pub fn rand_tensor(dims: &[usize], amp: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = dims.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-amp..amp)).collect();
    Tensor::from_vec(dims, data).expect("dims match data")
}

/// Uniform tensor in (lo, hi).
pub fn rand_tensor_range(dims: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = dims.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(dims, data).expect("dims match data")
}

/// Random +-1 loss weights; unit magnitudes keep every output term
/// contributing at full strength to the probed scalar.
pub fn sign_weights(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

pub fn weights_tensor(dims: &[usize], w: &[f64]) -> Tensor {
    Tensor::from_vec(dims, w.iter().map(|&v| v as f32).collect()).expect("dims match")
}

pub fn dot(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// ||a - b||2 / max(||a||2, ||b||2), guarded for the all-zero case.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

/// Largest |impl - ref| over all elements.
pub fn max_gap(actual: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(actual.len(), reference.len());
    actual
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a as f64 - r).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// f64 reference forwards.  Independent straight-loop implementations of
// the layer math; gradient checks difference these so the probes are
// free of f32 accumulation noise.

/// Output of a reference forward: values plus the branch taken at every
/// non-differentiable site (leaky-ReLU signs, pool argmax choices).
/// Partials whose two probe evaluations disagree on any branch sit on a
/// kink and are excluded from the comparison.
pub struct RefOut {
    pub y: Vec<f64>,
    pub dims: [usize; 4],
    pub branches: Vec<i8>,
}

pub fn ref_conv2d(
    x: &[f32],
    xd: [usize; 4],
    w: &[f32],
    wd: [usize; 4],
    b: &[f32],
    stride: usize,
    pad: usize,
) -> RefOut {
    let [n, c, h, wid] = xd;
    let [k, wc, kh, kw] = wd;
    assert_eq!(c, wc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0f64; n * k * oh * ow];
    for ni in 0..n {
        for kk in 0..k {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b[kk] as f64;
                    for cc in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oi * stride + ki) as isize - pad as isize;
                                let iw = (oj * stride + kj) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wid as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + cc) * h + ih as usize) * wid + iw as usize];
                                let wv = w[((kk * c + cc) * kh + ki) * kw + kj];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    y[((ni * k + kk) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    RefOut {
        y,
        dims: [n, k, oh, ow],
        branches: Vec::new(),
    }
}

/// Kernel-2 stride-2 transposed convolution: each input pixel scatters
/// into a disjoint 2x2 output patch.
pub fn ref_transposed_conv2d(x: &[f32], xd: [usize; 4], w: &[f32], wd: [usize; 4]) -> RefOut {
    let [n, c, h, wid] = xd;
    let [wc, k, kh, kw] = wd;
    assert_eq!((c, 2, 2), (wc, kh, kw));
    let (oh, ow) = (2 * h, 2 * wid);
    let mut y = vec![0.0f64; n * k * oh * ow];
    for ni in 0..n {
        for cc in 0..c {
            for r in 0..h {
                for s in 0..wid {
                    let xv = x[((ni * c + cc) * h + r) * wid + s] as f64;
                    for kk in 0..k {
                        for dr in 0..2 {
                            for dc in 0..2 {
                                let wv = w[((cc * k + kk) * 2 + dr) * 2 + dc] as f64;
                                y[((ni * k + kk) * oh + 2 * r + dr) * ow + 2 * s + dc] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    RefOut {
        y,
        dims: [n, k, oh, ow],
        branches: Vec::new(),
    }
}

/// Training-mode batch norm: biased batch statistics per channel.
pub fn ref_batch_norm_train(x: &[f64], xd: [usize; 4], gamma: &[f32], beta: &[f32]) -> Vec<f64> {
    let [n, c, h, w] = xd;
    let (hw, m) = (h * w, (n * h * w) as f64);
    let mut y = vec![0.0f64; x.len()];
    for cc in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            for px in 0..hw {
                sum += x[(ni * c + cc) * hw + px];
            }
        }
        let mu = sum / m;
        let mut s2 = 0.0;
        for ni in 0..n {
            for px in 0..hw {
                let d = x[(ni * c + cc) * hw + px] - mu;
                s2 += d * d;
            }
        }
        let inv = 1.0 / (s2 / m + BN_EPS as f64).sqrt();
        for ni in 0..n {
            for px in 0..hw {
                let i = (ni * c + cc) * hw + px;
                y[i] = gamma[cc] as f64 * (x[i] - mu) * inv + beta[cc] as f64;
            }
        }
    }
    y
}

/// Leaky ReLU, recording the branch sign of every element.
pub fn ref_leaky_relu(x: &[f64], branches: &mut Vec<i8>) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            branches.push((v > 0.0) as i8);
            if v > 0.0 {
                v
            } else {
                LEAKY_SLOPE as f64 * v
            }
        })
        .collect()
}

/// 2x2 max pooling, recording which corner won each window.
pub fn ref_max_pool2(x: &[f64], xd: [usize; 4], branches: &mut Vec<i8>) -> RefOut {
    let [n, c, h, w] = xd;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0f64; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0i8;
                for (which, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = plane[(2 * oi + di) * w + 2 * oj + dj];
                    if v > best {
                        best = v;
                        arg = which as i8;
                    }
                }
                branches.push(arg);
                y[(nc * oh + oi) * ow + oj] = best;
            }
        }
    }
    RefOut {
        y,
        dims: [n, c, oh, ow],
        branches: Vec::new(),
    }
}

/// Reference forward for one residual block in training mode:
/// conv-bn-lrelu, conv-bn, plus an identity or conv-bn shortcut, summed
/// and activated.
pub fn ref_block(p: &BlockParams, x: &[f32], xd: [usize; 4]) -> RefOut {
    let mut branches = Vec::new();
    let w1 = &p.main1.conv.weight;
    let [k1, c1, kh1, kw1] = [w1.dims()[0], w1.dims()[1], w1.dims()[2], w1.dims()[3]];
    let conv1 = ref_conv2d(x, xd, w1.data(), [k1, c1, kh1, kw1], p.main1.conv.bias.data(), 1, 1);
    let bn1 = ref_batch_norm_train(&conv1.y, conv1.dims, p.main1.bn.gamma.data(), p.main1.bn.beta.data());
    let a1 = ref_leaky_relu(&bn1, &mut branches);

    let a1_f32: Vec<f32> = a1.iter().map(|&v| v as f32).collect();
    let w2 = &p.main2.conv.weight;
    let [k2, c2, kh2, kw2] = [w2.dims()[0], w2.dims()[1], w2.dims()[2], w2.dims()[3]];
    let conv2 = ref_conv2d(
        &a1_f32,
        conv1.dims,
        w2.data(),
        [k2, c2, kh2, kw2],
        p.main2.conv.bias.data(),
        1,
        1,
    );
    let bn2 = ref_batch_norm_train(&conv2.y, conv2.dims, p.main2.bn.gamma.data(), p.main2.bn.beta.data());

    let shortcut: Vec<f64> = match &p.shortcut {
        None => x.iter().map(|&v| v as f64).collect(),
        Some(s) => {
            let ws = &s.conv.weight;
            let [ks, cs, khs, kws] = [ws.dims()[0], ws.dims()[1], ws.dims()[2], ws.dims()[3]];
            let conv_s = ref_conv2d(x, xd, ws.data(), [ks, cs, khs, kws], s.conv.bias.data(), 1, 0);
            ref_batch_norm_train(&conv_s.y, conv_s.dims, s.bn.gamma.data(), s.bn.beta.data())
        }
    };

    let sum: Vec<f64> = bn2.iter().zip(&shortcut).map(|(a, b)| a + b).collect();
    let y = ref_leaky_relu(&sum, &mut branches);
    RefOut {
        y,
        dims: conv2.dims,
        branches,
    }
}

// N.B. the reference casts the hidden activations back to f32 between
// block sub-layers so the probed function matches what the f32 engine
// computes; the FD arithmetic itself stays in f64.

// ---------------------------------------------------------------------------
// Finite-difference driver.

/// Result of one finite-difference comparison.
pub struct FdCheck {
    pub rel: f64,
    pub masked: usize,
    pub checked: usize,
}

/// Central finite differences of a scalar probe at every element of
/// `x`, compared against `analytic`.  Each probe returns the scalar and
/// the branch trace of the evaluation; partials whose two probes
/// disagree on a branch straddle a kink and are excluded.
pub fn fd_check(
    x: &Tensor,
    analytic: &Tensor,
    mut probe: impl FnMut(&Tensor) -> (f64, Vec<i8>),
) -> FdCheck {
    assert_eq!(x.dims(), analytic.dims(), "analytic gradient shape");
    let mut fd_v = Vec::with_capacity(x.len());
    let mut an_v = Vec::with_capacity(x.len());
    let mut masked = 0usize;
    for i in 0..x.len() {
        let base = x.data()[i] as f64;
        let mut xp = x.clone();
        xp.data_mut()[i] = (base + FD_H) as f32;
        let mut xm = x.clone();
        xm.data_mut()[i] = (base - FD_H) as f32;
        let (lp, bp) = probe(&xp);
        let (lm, bm) = probe(&xm);
        if bp != bm {
            masked += 1;
            continue;
        }
        // The achieved step after f32 quantization, not the nominal 2h.
        let step = xp.data()[i] as f64 - xm.data()[i] as f64;
        fd_v.push((lp - lm) / step);
        an_v.push(analytic.data()[i] as f64);
    }
    FdCheck {
        rel: rel_l2(&fd_v, &an_v),
        masked,
        checked: fd_v.len(),
    }
}

/// Aggregate over the per-tensor checks of one layer instance.
#[derive(Debug)]
pub struct OpCheck {
    pub worst_rel: f64,
    pub forward_gap: f64,
    pub masked: usize,
    pub checked: usize,
}

impl OpCheck {
    fn new(forward_gap: f64) -> OpCheck {
        OpCheck {
            worst_rel: 0.0,
            forward_gap,
            masked: 0,
            checked: 0,
        }
    }

    fn absorb(&mut self, c: FdCheck) {
        self.worst_rel = self.worst_rel.max(c.rel);
        self.masked += c.masked;
        self.checked += c.checked;
    }
}

// ---------------------------------------------------------------------------
// Per-layer gradient checks.  Shapes vary with the seed; each check
// differences the f64 reference and compares against the layer's
// analytic backward, also asserting the f32 forward tracks the
// reference.

pub fn gradcheck_conv2d(seed: u64) -> OpCheck {
    let mut r = rng(0xC04D ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let stride = 1 + (seed as usize % 2);
    let (ksz, pad) = if seed % 3 == 2 { (1, 0) } else { (3, 1) };
    // Extents must tile: (h + 2 pad - k) divisible by the stride.
    let (h, w) = if stride == 2 {
        (5, 7)
    } else {
        (4 + seed as usize % 3, 3 + (seed as usize / 3) % 3)
    };
    let n = 1 + (seed as usize % 2);
    let c = 2 + (seed as usize % 2);
    let k = 2 + (seed as usize / 2 % 2);
    let x = rand_tensor(&[n, c, h, w], 1.0, &mut r);
    let wgt = rand_tensor(&[k, c, ksz, ksz], 0.7, &mut r);
    let b = rand_tensor(&[k], 0.5, &mut r);
    let xd = [n, c, h, w];
    let wd = [k, c, ksz, ksz];

    let y = ops::conv2d(&x, &wgt, &b, stride, pad).unwrap();
    let reference = ref_conv2d(x.data(), xd, wgt.data(), wd, b.data(), stride, pad);
    let mut out = OpCheck::new(max_gap(y.data(), &reference.y));

    let wt = sign_weights(y.len(), &mut r);
    let wt_t = weights_tensor(y.dims(), &wt);
    let (gx, gw, gb) = ops::conv2d_backward(&wt_t, &x, &wgt, stride, pad).unwrap();

    out.absorb(fd_check(&x, &gx, |xp| {
        let rf = ref_conv2d(xp.data(), xd, wgt.data(), wd, b.data(), stride, pad);
        (dot(&rf.y, &wt), rf.branches)
    }));
    out.absorb(fd_check(&wgt, &gw, |wp| {
        let rf = ref_conv2d(x.data(), xd, wp.data(), wd, b.data(), stride, pad);
        (dot(&rf.y, &wt), rf.branches)
    }));
    out.absorb(fd_check(&b, &gb, |bp| {
        let rf = ref_conv2d(x.data(), xd, wgt.data(), wd, bp.data(), stride, pad);
        (dot(&rf.y, &wt), rf.branches)
    }));
    out
}

pub fn gradcheck_transposed_conv2d(seed: u64) -> OpCheck {
    let mut r = rng(0xDEC0 ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let n = 1 + (seed as usize % 2);
    let c = 2 + (seed as usize % 2);
    let k = 2 + (seed as usize / 2 % 2);
    let (h, w) = (3 + seed as usize % 2, 3 + (seed as usize / 2) % 3);
    let x = rand_tensor(&[n, c, h, w], 1.0, &mut r);
    let wgt = rand_tensor(&[c, k, 2, 2], 0.7, &mut r);
    let xd = [n, c, h, w];
    let wd = [c, k, 2, 2];

    let y = ops::transposed_conv2d(&x, &wgt).unwrap();
    let reference = ref_transposed_conv2d(x.data(), xd, wgt.data(), wd);
    let mut out = OpCheck::new(max_gap(y.data(), &reference.y));

    let wt = sign_weights(y.len(), &mut r);
    let wt_t = weights_tensor(y.dims(), &wt);
    let (gx, gw) = ops::transposed_conv2d_backward(&wt_t, &x, &wgt).unwrap();

    out.absorb(fd_check(&x, &gx, |xp| {
        let rf = ref_transposed_conv2d(xp.data(), xd, wgt.data(), wd);
        (dot(&rf.y, &wt), rf.branches)
    }));
    out.absorb(fd_check(&wgt, &gw, |wp| {
        let rf = ref_transposed_conv2d(x.data(), xd, wp.data(), wd);
        (dot(&rf.y, &wt), rf.branches)
    }));
    out
}

pub fn gradcheck_batch_norm(seed: u64) -> OpCheck {
    let mut r = rng(0xB4 ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let c = 2 + (seed as usize % 2);
    let (h, w) = (3 + seed as usize % 2, 4 + (seed as usize / 2) % 2);
    let x = rand_tensor(&[2, c, h, w], 1.0, &mut r);
    let xd = [2, c, h, w];
    let mut params = BatchNormParams::new(c);
    params.gamma = rand_tensor_range(&[c], 0.5, 1.5, &mut r);
    params.beta = rand_tensor(&[c], 0.5, &mut r);

    let to64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let reference = ref_batch_norm_train(&to64, xd, params.gamma.data(), params.beta.data());
    let mut work = params.clone();
    let (y, cache) = ops::batch_norm(&x, &mut work, Mode::Train, BN_MOMENTUM).unwrap();
    let mut out = OpCheck::new(max_gap(y.data(), &reference));

    let wt = sign_weights(y.len(), &mut r);
    let wt_t = weights_tensor(y.dims(), &wt);
    let (gx, ggamma, gbeta) =
        ops::batch_norm_backward(&wt_t, &x, &params.gamma, cache.as_ref().unwrap()).unwrap();

    out.absorb(fd_check(&x, &gx, |xp| {
        let xs: Vec<f64> = xp.data().iter().map(|&v| v as f64).collect();
        let rf = ref_batch_norm_train(&xs, xd, params.gamma.data(), params.beta.data());
        (dot(&rf, &wt), Vec::new())
    }));
    out.absorb(fd_check(&params.gamma, &ggamma, |gp| {
        let rf = ref_batch_norm_train(&to64, xd, gp.data(), params.beta.data());
        (dot(&rf, &wt), Vec::new())
    }));
    out.absorb(fd_check(&params.beta, &gbeta, |bp| {
        let rf = ref_batch_norm_train(&to64, xd, params.gamma.data(), bp.data());
        (dot(&rf, &wt), Vec::new())
    }));
    out
}

pub fn gradcheck_leaky_relu(seed: u64) -> OpCheck {
    let mut r = rng(0x1EA4 ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let mut x = rand_tensor(&[2, 3, 5, 4], 1.0, &mut r);
    // Keep inputs at least 10 steps away from the kink at zero.
    for v in x.data_mut() {
        if v.abs() < 0.02 {
            *v = if *v >= 0.0 { 0.02 } else { -0.02 };
        }
    }

    let y = ops::leaky_relu(&x, LEAKY_SLOPE);
    let mut branches = Vec::new();
    let to64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let reference = ref_leaky_relu(&to64, &mut branches);
    let mut out = OpCheck::new(max_gap(y.data(), &reference));

    let wt = sign_weights(y.len(), &mut r);
    let wt_t = weights_tensor(y.dims(), &wt);
    let gx = ops::leaky_relu_backward(&wt_t, &x, LEAKY_SLOPE).unwrap();

    out.absorb(fd_check(&x, &gx, |xp| {
        let xs: Vec<f64> = xp.data().iter().map(|&v| v as f64).collect();
        let mut b = Vec::new();
        let rf = ref_leaky_relu(&xs, &mut b);
        (dot(&rf, &wt), b)
    }));
    out
}

pub fn gradcheck_max_pool2(seed: u64) -> OpCheck {
    let mut r = rng(0x900C ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let (n, c, h, w) = (2, 2 + (seed as usize % 2), 6, 4);
    // Well-separated values so no window sits near a tie.
    let len = n * c * h * w;
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    let data: Vec<f32> = order
        .iter()
        .map(|&rank| rank as f32 * 0.037 - 1.0 + r.gen_range(-3e-4..3e-4))
        .collect();
    let x = Tensor::from_vec(&[n, c, h, w], data).unwrap();
    let xd = [n, c, h, w];

    let (y, cache) = ops::max_pool2(&x).unwrap();
    let to64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut branches = Vec::new();
    let reference = ref_max_pool2(&to64, xd, &mut branches);
    let mut out = OpCheck::new(max_gap(y.data(), &reference.y));

    let wt = sign_weights(y.len(), &mut r);
    let wt_t = weights_tensor(y.dims(), &wt);
    let gx = ops::max_pool2_backward(&wt_t, &cache).unwrap();

    out.absorb(fd_check(&x, &gx, |xp| {
        let xs: Vec<f64> = xp.data().iter().map(|&v| v as f64).collect();
        let mut b = Vec::new();
        let rf = ref_max_pool2(&xs, xd, &mut b);
        (dot(&rf.y, &wt), b)
    }));
    out
}

/// Composite check: softmax plus weighted cross-entropy.  The loss is
/// already a scalar with f64 internals, so it is differenced directly.
pub fn gradcheck_softmax_ce(seed: u64) -> OpCheck {
    let mut r = rng(0x50F7 ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let n = 1 + (seed as usize % 2);
    let (h, w) = (3 + seed as usize % 2, 4 + (seed as usize / 2) % 2);
    let logits = rand_tensor(&[n, 3, h, w], 2.0, &mut r);
    let alpha = [1.3, 0.7, 2.0];
    let grids: Vec<LabelGrid> = (0..n)
        .map(|_| {
            let cells = (0..h * w)
                .map(|_| ClassId::from_u8(r.gen_range(0..3u8)).unwrap())
                .collect();
            LabelGrid::from_data(h, w, cells).unwrap()
        })
        .collect();

    let (_, grad) = weighted_ce_loss(&logits, &grids, alpha).unwrap();
    let mut out = OpCheck::new(0.0);
    out.absorb(fd_check(&logits, &grad, |lp| {
        (weighted_ce_loss(lp, &grids, alpha).unwrap().0, Vec::new())
    }));
    out
}

pub fn gradcheck_resnet_block(seed: u64) -> OpCheck {
    let mut r = rng(0xB10C ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let (c_in, c_out) = if seed % 2 == 0 { (3, 4) } else { (4, 4) };
    let n = 1 + (seed as usize % 2);
    let block = BlockParams::init(c_out, c_in, &mut r);
    let x = rand_tensor(&[n, c_in, 6, 6], 1.0, &mut r);
    let xd = [n, c_in, 6, 6];

    let mut work = block.clone();
    let (y, cache) = work.forward_train(&x).unwrap();
    let reference = ref_block(&block, x.data(), xd);
    let mut out = OpCheck::new(max_gap(y.data(), &reference.y));

    let wt = sign_weights(y.len(), &mut r);
    let wt_t = weights_tensor(y.dims(), &wt);
    let (gx, grads) = work.backward(&cache, &wt_t).unwrap();

    let probe = |xp: &Tensor, bp: &BlockParams| {
        let rf = ref_block(bp, xp.data(), xd);
        (dot(&rf.y, &wt), rf.branches)
    };

    out.absorb(fd_check(&x, &gx, |xp| probe(xp, &block)));
    out.absorb(fd_check(&block.main1.conv.weight, &grads.main1.weight, |wp| {
        let mut b = block.clone();
        b.main1.conv.weight = wp.clone();
        probe(&x, &b)
    }));
    out.absorb(fd_check(&block.main2.bn.gamma, &grads.main2.gamma, |gp| {
        let mut b = block.clone();
        b.main2.bn.gamma = gp.clone();
        probe(&x, &b)
    }));
    out.absorb(fd_check(&block.main2.bn.beta, &grads.main2.beta, |bp| {
        let mut b = block.clone();
        b.main2.bn.beta = bp.clone();
        probe(&x, &b)
    }));
    if let (Some(sc), Some(sg)) = (&block.shortcut, &grads.shortcut) {
        out.absorb(fd_check(&sc.conv.weight, &sg.weight, |wp| {
            let mut b = block.clone();
            b.shortcut.as_mut().unwrap().conv.weight = wp.clone();
            probe(&x, &b)
        }));
    }
    out
}

// ---------------------------------------------------------------------------
// Straight-line projection oracles.

/// Channel-planar BEV image computed with per-cell point lists.
pub fn naive_bev(cloud: &PointCloud, spec: &BevSpec) -> Vec<f32> {
    let (h, w) = (spec.height(), spec.width());
    let mut cells: Vec<Vec<(f64, f64)>> = vec![Vec::new(); h * w];
    for p in cloud.points() {
        let fr = ((p.x as f64 - spec.roi().x_min() as f64) / spec.cell_x() as f64).floor();
        let fc = ((p.y as f64 - spec.roi().y_min() as f64) / spec.cell_y() as f64).floor();
        if fr < 0.0 || fc < 0.0 || fr >= h as f64 || fc >= w as f64 {
            continue;
        }
        cells[fr as usize * w + fc as usize].push((p.z as f64, p.intensity as f64));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; 4 * plane];
    for (cell, pts) in cells.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let norm_z = |z: f32| ((z + 3.0) / 6.0).clamp(0.0, 1.0);
        let n = pts.len() as f64;
        let mean_z = (pts.iter().map(|t| t.0).sum::<f64>() / n) as f32;
        let max_z = pts.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max) as f32;
        let mean_i = (pts.iter().map(|t| t.1).sum::<f64>() / n) as f32;
        out[BEV_MEAN_Z * plane + cell] = norm_z(mean_z);
        out[BEV_MAX_Z * plane + cell] = norm_z(max_z);
        out[BEV_MEAN_INTENSITY * plane + cell] = mean_i;
        out[BEV_COUNT * plane + cell] = (pts.len() as f32).min(64.0) / 64.0;
    }
    out
}

/// SFV cell of a point under the documented angle formulas, or None.
pub fn naive_sfv_bin(p: &Point, spec: &SfvSpec) -> Option<(usize, usize, f64)> {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let r2 = (x * x + y * y).sqrt();
    if r2 == 0.0 {
        return None;
    }
    let r3 = (x * x + y * y + z * z).sqrt();
    let theta = (z / r3).asin();
    let phi = (y / r2).asin();
    let zmin = (spec.zenith_min_deg() as f64).to_radians();
    let zmax = (spec.zenith_max_deg() as f64).to_radians();
    let half = (spec.azimuth_fov_deg() as f64).to_radians() / 2.0;
    let rows = GridBinning::rows(spec);
    let cols = GridBinning::cols(spec);
    let u = ((theta - zmin) / ((zmax - zmin) / rows as f64)).floor();
    let v = ((phi + half) / (2.0 * half / cols as f64)).floor();
    if u < 0.0 || v < 0.0 || u >= rows as f64 || v >= cols as f64 {
        return None;
    }
    Some((rows - 1 - u as usize, v as usize, r3))
}

/// Channel-planar SFV image: nearest return per cell.
pub fn naive_sfv(cloud: &PointCloud, spec: &SfvSpec) -> Vec<f32> {
    let rows = GridBinning::rows(spec);
    let cols = GridBinning::cols(spec);
    let plane = rows * cols;
    let mut best: Vec<Option<(f64, [f32; 4])>> = vec![None; plane];
    for p in cloud.points() {
        let Some((r, c, range)) = naive_sfv_bin(p, spec) else {
            continue;
        };
        let cell = r * cols + c;
        let closer = match best[cell] {
            None => true,
            Some((prev, _)) => range < prev,
        };
        if closer {
            best[cell] = Some((range, [p.x, p.y, p.z, p.intensity]));
        }
    }
    let mut out = vec![0.0f32; 6 * plane];
    for (cell, slot) in best.iter().enumerate() {
        let Some((range, [x, y, z, i])) = slot else {
            continue;
        };
        out[SFV_X * plane + cell] = *x;
        out[SFV_Y * plane + cell] = *y;
        out[SFV_Z * plane + cell] = *z;
        out[SFV_INTENSITY * plane + cell] = *i;
        out[SFV_RANGE * plane + cell] = *range as f32;
        out[SFV_MASK * plane + cell] = 1.0;
    }
    out
}

/// Plurality label rasterization with vehicle > road > background
/// tie-breaking, via an arbitrary binning closure.
pub fn naive_labels(
    cloud: &PointCloud,
    rows: usize,
    cols: usize,
    mut bin: impl FnMut(&Point) -> Option<(usize, usize)>,
) -> Vec<ClassId> {
    let labels = cloud.labels().expect("labeled cloud");
    let mut counts = vec![[0u32; 3]; rows * cols];
    for (p, &l) in cloud.points().iter().zip(labels) {
        if let Some((r, c)) = bin(p) {
            counts[r * cols + c][l.as_index()] += 1;
        }
    }
    counts
        .iter()
        .map(|cell| {
            if cell.iter().all(|&n| n == 0) {
                return ClassId::Background;
            }
            // Maximize (count, class index): higher index = higher
            // priority on equal counts.
            let mut winner = 0usize;
            for idx in 1..3 {
                if cell[idx] >= cell[winner] {
                    winner = idx;
                }
            }
            ClassId::from_u8(winner as u8).unwrap()
        })
        .collect()
}

/// Random cloud spanning the ROI interior, boundaries and outside.
pub fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut r = rng(0xC1_0D ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let points = (0..n)
        .map(|_| Point {
            x: r.gen_range(-15.0..65.0),
            y: r.gen_range(-10.0..16.0),
            z: r.gen_range(-4.0..4.0),
            intensity: r.gen_range(0.0..1.0),
        })
        .collect();
    PointCloud::new(points)
}

/// As [`random_cloud`] but with random per-point class labels.
pub fn random_labeled_cloud(seed: u64, n: usize) -> PointCloud {
    let cloud = random_cloud(seed, n);
    let mut r = rng(0x1AB ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let labels = (0..n)
        .map(|_| ClassId::from_u8(r.gen_range(0..3u8)).unwrap())
        .collect();
    let mut cloud = cloud;
    cloud.set_labels(labels).unwrap();
    cloud
}

// ---------------------------------------------------------------------------
// Synthetic training frames.

/// Shape of the synthetic frames produced by [`synthetic_frame`].
pub struct FrameSpec {
    pub h: usize,
    pub w: usize,
    /// Scale of the road-indicator input channel.
    pub road_evidence: f32,
    /// Scale of the vehicle-indicator input channel.
    pub vehicle_evidence: f32,
    /// Amplitude of the uniform noise mixed into every channel.
    pub noise: f32,
    /// Side length of the square vehicle blob.
    pub vehicle_side: usize,
}

impl FrameSpec {
    /// Strong evidence, easy to fit.
    pub fn easy(h: usize, w: usize) -> FrameSpec {
        FrameSpec {
            h,
            w,
            road_evidence: 1.0,
            vehicle_evidence: 1.0,
            noise: 0.15,
            vehicle_side: 6,
        }
    }
}

/// Builds a labeled frame: a road band spanning the width, a vehicle
/// blob, background elsewhere; 4 input channels (BEV-shaped) carry
/// scaled class indicators plus noise.  Fully determined by the seed.
pub fn synthetic_frame(spec: &FrameSpec, seed: u64) -> (GridImage, LabelGrid) {
    let (h, w) = (spec.h, spec.w);
    let mut r = rng(0xF4A3 ^ seed.wrapping_mul(0x9E3779B97F4A7C15));
    let mut labels = vec![ClassId::Background; h * w];

    let band_top = h / 4 + (seed as usize % (h / 4).max(1));
    let band_h = h / 3;
    for row in band_top..(band_top + band_h).min(h) {
        for col in 0..w {
            labels[row * w + col] = ClassId::Road;
        }
    }
    let side = spec.vehicle_side.min(h).min(w);
    let vr = (seed as usize * 7 + 3) % (h - side);
    let vc = (seed as usize * 13 + 5) % (w - side);
    for row in vr..vr + side {
        for col in vc..vc + side {
            labels[row * w + col] = ClassId::Vehicle;
        }
    }

    let plane = h * w;
    let mut chw = vec![0.0f32; 4 * plane];
    for (i, &class) in labels.iter().enumerate() {
        let road = (class == ClassId::Road) as u8 as f32;
        let vehicle = (class == ClassId::Vehicle) as u8 as f32;
        chw[i] = spec.road_evidence * road + r.gen_range(-spec.noise..spec.noise);
        chw[plane + i] = spec.vehicle_evidence * vehicle + r.gen_range(-spec.noise..spec.noise);
        chw[2 * plane + i] = r.gen_range(-spec.noise..spec.noise);
        chw[3 * plane + i] = 0.5 + 0.1 * (i / w) as f32 / h as f32;
    }
    let grid = GridImage::from_chw(GridKind::Bev, h, w, chw).unwrap();
    let labels = LabelGrid::from_data(h, w, labels).unwrap();
    (grid, labels)
}

/// Fraction of cells labeled with `class` across the frames.
pub fn class_fraction(frames: &[(GridImage, LabelGrid)], class: ClassId) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (_, labels) in frames {
        total += labels.data().len();
        hits += labels.data().iter().filter(|&&c| c == class).count();
    }
    hits as f64 / total as f64
}
