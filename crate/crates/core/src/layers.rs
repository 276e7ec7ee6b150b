//! Forward and backward rules for every layer the network uses.
//!
//! All functions are pure: they take tensors and return tensors. The tape in
//! [`crate::autograd`] wires them together, and the model calls them through
//! the tape. Feature maps are `[N, C, H, W]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Clamp applied to probabilities before taking the log in the loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `[out_ch, in_ch, k, k]` with `k` 3 or 1.
    pub kernel: Tensor<T>,
    /// `[out_ch]`
    pub bias: Tensor<T>,
}

impl<T: Element> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (cout, _, kh, kw) = kernel.dims4()?;
        if kh != kw || !(kh == 3 || kh == 1) {
            return Err(Error::invalid(
                "ConvParams",
                format!("kernel must be 3x3 or 1x1, got {kh}x{kw}"),
            ));
        }
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "ConvParams bias",
                left: bias.shape().to_vec(),
                right: vec![cout],
            });
        }
        Ok(ConvParams { kernel, bias })
    }

    /// He (fan-in) normal initialization with zero bias.
    pub fn he_normal(in_ch: usize, out_ch: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let kernel = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| {
            T::from_f64_lossy(normal.sample(rng))
        })?;
        Self::new(kernel, Tensor::zeros(&[out_ch])?)
    }

    pub fn zeros(in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[out_ch, in_ch, k, k])?,
            Tensor::zeros(&[out_ch])?,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Padding that keeps the spatial size: 1 for 3×3, 0 for 1×1.
    pub fn same_padding(&self) -> usize {
        self.kernel_size() / 2
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (x, kernel) else {
            return Err(Error::invalid(
                "conv2d",
                format!("expected rank-4 input and kernel, got {x:?} and {kernel:?}"),
            ));
        };
        if cin != kcin {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: x.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        if pad >= kh || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("padding {pad} invalid for {kh}x{kw} kernel on {h}x{w} input"),
            ));
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    /// A 1×1 kernel without padding reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose tap at kernel column `kj` lands inside the input.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wo);
        (lo, hi.max(lo))
    }

    fn im2col<T: Element>(&self, xs: &[T], cols: &mut [T]) {
        let p = self.out_plane();
        for ci in 0..self.cin {
            let plane = &xs[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = oy + ki;
                        if iy < self.pad || iy - self.pad >= self.h {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[(iy - self.pad) * self.w..(iy - self.pad + 1) * self.w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let ix0 = lo + kj - self.pad;
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    }
                }
            }
        }
    }

    fn col2im_add<T: Element>(&self, cols: &[T], xs: &mut [T]) {
        let p = self.out_plane();
        for ci in 0..self.cin {
            let plane = &mut xs[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let iy = oy + ki;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let ix0 = lo + kj - self.pad;
                        let dst = &mut plane[(iy - self.pad) * self.w + ix0..];
                        let seg = &src[oy * self.wo + lo..oy * self.wo + hi];
                        for (d, &s) in dst.iter_mut().zip(seg) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), padding)?;
    if bias.shape() != [g.cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: bias.shape().to_vec(),
            right: vec![g.cout],
        });
    }
    let (kk, p) = (g.patch_len(), g.out_plane());
    let mut out = vec![T::zero(); g.n * g.out_sample()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };

    for ni in 0..g.n {
        let xs = &x.data()[ni * g.in_sample()..(ni + 1) * g.in_sample()];
        let ys = &mut out[ni * g.out_sample()..(ni + 1) * g.out_sample()];
        for (co, &b) in bias.data().iter().enumerate() {
            ys[co * p..(co + 1) * p].fill(b);
        }
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            kk,
            p,
            T::one(),
            (kernel.data(), kk as isize, 1),
            (cols, p as isize, 1),
            T::one(),
            (ys, p as isize, 1),
        );
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), padding)?;
    let expected = [g.n, g.cout, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: grad_out.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    let (kk, p) = (g.patch_len(), g.out_plane());
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];

    for ni in 0..g.n {
        let xs = &x.data()[ni * g.in_sample()..(ni + 1) * g.in_sample()];
        let dys = &grad_out.data()[ni * g.out_sample()..(ni + 1) * g.out_sample()];
        for (co, d) in db.iter_mut().enumerate() {
            *d += dys[co * p..(co + 1) * p].iter().copied().sum::<T>();
        }
        let dxs = &mut dx[ni * g.in_sample()..(ni + 1) * g.in_sample()];

        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut cols);
            &cols
        };
        // dK += dY · colsᵀ
        T::gemm(
            g.cout,
            p,
            kk,
            T::one(),
            (dys, p as isize, 1),
            (cols_ref, 1, p as isize),
            T::one(),
            (&mut dk, kk as isize, 1),
        );
        // dcols = Kᵀ · dY
        let dcols_ref: &mut [T] = if g.is_pointwise() { dxs } else { &mut dcols };
        T::gemm(
            kk,
            g.cout,
            p,
            T::one(),
            (kernel.data(), 1, kk as isize),
            (dys, p as isize, 1),
            T::zero(),
            (dcols_ref, p as isize, 1),
        );
        if !g.is_pointwise() {
            g.col2im_add(&dcols, dxs);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::new(&[g.cout], db)?,
    })
}

// ---------------------------------------------------------------------------
// Batch normalization

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormParams<T> {
    /// Identity-initialized: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// `running ← (1 − momentum)·running + momentum·batch`
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Values saved by a train-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance.
    pub batch_var: Vec<T>,
}

fn bn_check<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::invalid(
                "batchnorm2d",
                format!("{name} has shape {:?}, expected [{c}]", t.shape()),
            ));
        }
    }
    Ok((n, c, h * w))
}

/// Train-mode batch norm: normalizes each channel with its batch statistics
/// over `(N, H, W)`.
pub fn batchnorm2d_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = bn_check(x, gamma, beta)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::invalid(
            "batchnorm2d",
            "train mode needs at least 2 elements per channel",
        ));
    }
    let xs = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        // Accumulate in f64 so that f32 statistics over large images stay accurate.
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for ni in 0..n {
            for &v in &xs[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                s += v.to_f64_lossy();
            }
        }
        let mu = s / m as f64;
        for ni in 0..n {
            for &v in &xs[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                let d = v.to_f64_lossy() - mu;
                s2 += d * d;
            }
        }
        let v = s2 / m as f64;
        mean[ch] = T::from_f64_lossy(mu);
        var[ch] = T::from_f64_lossy(v);
        inv_std[ch] = T::from_f64_lossy(1.0 / (v + eps).sqrt());
    }

    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = vec![T::zero(); xs.len()];
    for ni in 0..n {
        for ch in 0..c {
            let range = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in range {
                let xh = (xs[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    let out = Tensor::new(x.shape(), out)?;
    Ok((
        out,
        BnCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Eval-mode batch norm: a fixed per-channel affine map from running statistics.
pub fn batchnorm2d_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, hw) = bn_check(x, gamma, beta)?;
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let is = T::from_f64_lossy(1.0 / (running_var.data()[ch].to_f64_lossy() + eps).sqrt());
        let scale = gamma.data()[ch] * is;
        let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
        for ni in 0..n {
            let range = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
            for i in range {
                out[i] = x.data()[i] * scale + shift;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Batch norm on a parameter set; train mode also updates the running statistics.
pub fn batchnorm2d<T: Element>(
    x: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let (y, cache) = batchnorm2d_train(x, &params.gamma, &params.beta, params.eps)?;
            params.update_running(&cache.batch_mean, &cache.batch_var);
            Ok(y)
        }
        Mode::Eval => batchnorm2d_eval(
            x,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
            params.eps,
        ),
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn per_channel_sums<T: Element>(
    dy: &Tensor<T>,
    xhat: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let range = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
            for i in range {
                dbeta[ch] += dy.data()[i];
                dgamma[ch] += dy.data()[i] * xhat[i];
            }
        }
    }
    (dgamma, dbeta)
}

pub fn batchnorm2d_train_backward<T: Element>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    grad_out.expect_same_shape(&cache.xhat, "batchnorm2d_backward")?;
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = T::from_usize(n * hw).expect("count fits");
    let xhat = cache.xhat.data();
    let (dgamma, dbeta) = per_channel_sums(grad_out, xhat, n, c, hw);
    let mut dx = vec![T::zero(); grad_out.len()];
    for ni in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            let range = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
            for i in range {
                dx[i] = k * (m * grad_out.data()[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

pub fn batchnorm2d_eval_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    grad_out.expect_same_shape(x, "batchnorm2d_backward")?;
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|v| T::from_f64_lossy(1.0 / (v.to_f64_lossy() + eps).sqrt()))
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut dx = vec![T::zero(); x.len()];
    for ni in 0..n {
        for (ch, &s) in inv_std.iter().enumerate() {
            let range = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
            for i in range {
                xhat[i] = (x.data()[i] - running_mean.data()[ch]) * s;
                dx[i] = grad_out.data()[i] * gamma.data()[ch] * s;
            }
        }
    }
    let (dgamma, dbeta) = per_channel_sums(grad_out, &xhat, n, c, hw);
    Ok(BnGrads {
        input: Tensor::new(x.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

// ---------------------------------------------------------------------------
// ReLU

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, "relu_backward", |v, g| {
        if v > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

// ---------------------------------------------------------------------------
// Max pooling and unpooling

/// Argmax positions of a 2×2 stride-2 max-pool, as flat offsets into the
/// pooled input. One offset per pooled output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    offsets: Vec<usize>,
}

impl PoolIndices {
    pub fn new(input_shape: [usize; 4], offsets: Vec<usize>) -> Result<Self> {
        let idx = PoolIndices {
            input_shape,
            offsets,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let [n, c, h, w] = self.input_shape;
        [n, c, h / 2, w / 2]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Checks that every offset lies inside its own 2×2 window.
    pub fn validate(&self) -> Result<()> {
        let [n, c, h, w] = self.input_shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("PoolIndices", "odd input dims"));
        }
        let (ho, wo) = (h / 2, w / 2);
        if self.offsets.len() != n * c * ho * wo {
            return Err(Error::invalid("PoolIndices", "wrong number of offsets"));
        }
        for (i, &off) in self.offsets.iter().enumerate() {
            let plane = i / (ho * wo);
            let (oy, ox) = ((i % (ho * wo)) / wo, i % wo);
            let local = off.checked_sub(plane * h * w);
            let inside = local.is_some_and(|l| l < h * w && (l / w) / 2 == oy && (l % w) / 2 == ox);
            if !inside {
                return Err(Error::invalid(
                    "PoolIndices",
                    format!("offset {off} for output {i} is outside its window"),
                ));
            }
        }
        Ok(())
    }
}

/// 2×2 non-overlapping max-pool with stride 2. Ties go to the first element
/// of the window in row-major order.
pub fn maxpool2d<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut offsets = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if xs[cand] > xs[best] {
                        best = cand;
                    }
                }
                out.push(xs[best]);
                offsets.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[n, c, ho, wo], out)?,
        PoolIndices {
            input_shape: [n, c, h, w],
            offsets,
        },
    ))
}

fn expect_pooled_shape(y: &[usize], idx: &PoolIndices, op: &'static str) -> Result<()> {
    if y != idx.output_shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: y.to_vec(),
            right: idx.output_shape().to_vec(),
        });
    }
    Ok(())
}

/// Places each value at its recorded argmax offset; everything else is zero.
pub fn maxunpool2d<T: Element>(y: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    expect_pooled_shape(y.shape(), idx, "maxunpool2d")?;
    let mut out = vec![T::zero(); idx.input_shape.iter().product()];
    for (&off, &v) in idx.offsets.iter().zip(y.data()) {
        out[off] = v;
    }
    Tensor::new(&idx.input_shape, out)
}

/// Routes each pooled gradient back to its argmax position.
pub fn maxpool2d_backward<T: Element>(
    grad_out: &Tensor<T>,
    idx: &PoolIndices,
) -> Result<Tensor<T>> {
    maxunpool2d(grad_out, idx)
}

/// Gathers the gradient at each recorded offset.
pub fn maxunpool2d_backward<T: Element>(
    grad_out: &Tensor<T>,
    idx: &PoolIndices,
) -> Result<Tensor<T>> {
    if grad_out.shape() != idx.input_shape {
        return Err(Error::ShapeMismatch {
            op: "maxunpool2d_backward",
            left: grad_out.shape().to_vec(),
            right: idx.input_shape.to_vec(),
        });
    }
    let data = idx.offsets.iter().map(|&o| grad_out.data()[o]).collect();
    Tensor::new(&idx.output_shape(), data)
}

// ---------------------------------------------------------------------------
// Softmax over channels and the weighted cross-entropy loss

/// Per-pixel softmax over the channel axis, with max subtraction.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(xs[base + ch * hw + p]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xs[base + ch * hw + p] - max).exp();
                out[base + ch * hw + p] = e;
                total += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_channels_backward<T: Element>(
    probs: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    probs.expect_same_shape(grad_out, "softmax_backward")?;
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let (ps, gs) = (probs.data(), grad_out.data());
    let mut out = vec![T::zero(); ps.len()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += ps[base + ch * hw + p] * gs[base + ch * hw + p];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                out[i] = ps[i] * (gs[i] - dot);
            }
        }
    }
    Tensor::new(probs.shape(), out)
}

fn check_loss_inputs<T: Element>(
    probs: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
    fov: &[u8],
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = probs.dims4()?;
    let pixels = n * h * w;
    if target.len() != pixels || fov.len() != pixels {
        return Err(Error::invalid(
            "weighted_cross_entropy",
            format!(
                "target/fov hold {}/{} pixels, probabilities {pixels}",
                target.len(),
                fov.len()
            ),
        ));
    }
    if weights.len() != c {
        return Err(Error::invalid(
            "weighted_cross_entropy",
            format!("{} weights for {c} classes", weights.len()),
        ));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::invalid(
            "weighted_cross_entropy",
            format!("target class {t} out of range"),
        ));
    }
    let count = fov.iter().filter(|&&f| f != 0).count();
    if count == 0 {
        return Err(Error::invalid(
            "weighted_cross_entropy",
            "empty field of view",
        ));
    }
    Ok((n, c, h * w, count))
}

/// `−(1/|FOV|) Σ_{p∈FOV} w[t(p)] · log(max(prob[t(p)](p), 1e-12))`
///
/// `target` and `fov` are `N·H·W` maps in batch-major order.
pub fn weighted_cross_entropy<T: Element>(
    probs: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
    fov: &[u8],
) -> Result<T> {
    let (n, c, hw, count) = check_loss_inputs(probs, target, weights, fov)?;
    let ps = probs.data();
    let mut total = 0.0f64;
    for ni in 0..n {
        for p in 0..hw {
            let i = ni * hw + p;
            if fov[i] == 0 {
                continue;
            }
            let t = target[i] as usize;
            let prob = ps[(ni * c + t) * hw + p].to_f64_lossy();
            total += weights[t] * prob.max(LOG_CLAMP).ln();
        }
    }
    Ok(T::from_f64_lossy(-total / count as f64))
}

/// Gradient of [`weighted_cross_entropy`] with respect to the probabilities.
/// Clamped entries get zero gradient.
pub fn weighted_cross_entropy_backward<T: Element>(
    probs: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
    fov: &[u8],
) -> Result<Tensor<T>> {
    let (n, c, hw, count) = check_loss_inputs(probs, target, weights, fov)?;
    let ps = probs.data();
    let mut grad = vec![T::zero(); ps.len()];
    for ni in 0..n {
        for p in 0..hw {
            let i = ni * hw + p;
            if fov[i] == 0 {
                continue;
            }
            let t = target[i] as usize;
            let j = (ni * c + t) * hw + p;
            let prob = ps[j].to_f64_lossy();
            if prob > LOG_CLAMP {
                grad[j] = T::from_f64_lossy(-weights[t] / (count as f64 * prob));
            }
        }
    }
    Tensor::new(probs.shape(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Six nested loops, written without im2col.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, kh, kw) = k.dims4().unwrap();
        let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let mut out = Tensor::zeros(&[n, cout, ho, wo]).unwrap();
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy + ki) as isize - pad as isize;
                                    let ix = (ox + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((ni * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_valid() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        let k = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]).unwrap(), 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 1, 5, 4], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        for (k, pad) in [(3, 1), (1, 0), (3, 0)] {
            let kern = rand_tensor(&[3, 2, k, k], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let fast = conv2d(&x, &kern, &b, pad).unwrap();
            let slow = naive_conv(&x, &kern, &b, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let k = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1]).unwrap(), 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_params_reject_5x5() {
        let k = Tensor::<f32>::zeros(&[1, 1, 5, 5]).unwrap();
        assert!(ConvParams::new(k, Tensor::zeros(&[1]).unwrap()).is_err());
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = rand_tensor(&[4, 3, 3, 3], &mut rng).cast::<f32>();
        let zero = Tensor::zeros(&[4]).unwrap();
        let x = rand_tensor(&[1, 3, 6, 6], &mut rng).cast::<f32>();
        let y = rand_tensor(&[1, 3, 6, 6], &mut rng).cast::<f32>();
        let (a, b) = (0.7f32, -1.3f32);
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &k, &zero, 1).unwrap();
        let rhs = conv2d(&x, &k, &zero, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &k, &zero, 1).unwrap().scale(b))
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-5 * l.abs().max(r.abs()).max(1.0));
        }
    }

    #[test]
    fn batchnorm_constant_input_is_zero() {
        let x = Tensor::<f32>::full(&[2, 1, 3, 3], 4.2).unwrap();
        let mut p = BatchNormParams::new(1).unwrap();
        let y = batchnorm2d(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn batchnorm_hand_values() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = BatchNormParams::<f64>::new(1).unwrap();
        let y = batchnorm2d(&x, &mut p, Mode::Train).unwrap();
        for (a, e) in y.data().iter().zip([-1.342, -0.447, 0.447, 1.342]) {
            assert!((a - e).abs() < 1e-3, "{a} vs {e}");
        }
        // running ← 0.9·running + 0.1·batch
        assert!((p.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.9 + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_affine_on_normalized_batch() {
        // mean 0, biased var 1 exactly
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut p = BatchNormParams::<f64>::new(1).unwrap();
        p.gamma = Tensor::full(&[1], 2.0).unwrap();
        p.beta = Tensor::full(&[1], 3.0).unwrap();
        let y = batchnorm2d(&x, &mut p, Mode::Train).unwrap();
        for (a, v) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * v + 3.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_does_not_mutate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng).cast::<f32>();
        let mut p = BatchNormParams::new(3).unwrap();
        batchnorm2d(&x, &mut p, Mode::Train).unwrap();
        let snapshot = p.clone();
        let a = batchnorm2d(&x, &mut p, Mode::Eval).unwrap();
        let b = batchnorm2d(&x, &mut p, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, snapshot);
    }

    #[test]
    fn batchnorm_eval_uninitialized_stats_is_identity() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![0.5, -2.0]).unwrap();
        let mut p = BatchNormParams::<f64>::new(1).unwrap();
        let y = batchnorm2d(&x, &mut p, Mode::Eval).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_elements() {
        let x = Tensor::<f32>::ones(&[1, 1, 1, 1]).unwrap();
        let mut p = BatchNormParams::new(1).unwrap();
        assert!(batchnorm2d(&x, &mut p, Mode::Train).is_err());
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&y), y);
        let pos = Tensor::<f32>::new(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&x, &Tensor::ones(&[3]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_hand_cases() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.offsets(), &[3]);

        let c = Tensor::<f32>::full(&[1, 2, 4, 4], 7.0).unwrap();
        let (y, idx) = maxpool2d(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        // top-left of every window
        let expected: Vec<usize> = (0..2)
            .flat_map(|p| (0..2).flat_map(move |oy| (0..2).map(move |ox| p * 16 + oy * 8 + ox * 2)))
            .collect();
        assert_eq!(idx.offsets(), expected.as_slice());
        idx.validate().unwrap();
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(maxpool2d(&x).is_err());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[1, 1, 6, 6], &mut rng);
        let (y, idx) = maxpool2d(&x).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut best = (f64::NEG_INFINITY, 0);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let o = (2 * oy + dy) * 6 + 2 * ox + dx;
                        if x.data()[o] > best.0 {
                            best = (x.data()[o], o);
                        }
                    }
                }
                assert_eq!(y.data()[oy * 3 + ox], best.0);
                assert_eq!(idx.offsets()[oy * 3 + ox], best.1);
            }
        }
    }

    #[test]
    fn unpool_single_placement() {
        let y = Tensor::<f32>::new(&[1, 1, 1, 1], vec![4.0]).unwrap();
        let idx = PoolIndices::new([1, 1, 2, 2], vec![3]).unwrap();
        assert_eq!(maxunpool2d(&y, &idx).unwrap().data(), &[0.0, 0.0, 0.0, 4.0]);
        let bad = Tensor::<f32>::zeros(&[1, 1, 2, 1]).unwrap();
        assert!(maxunpool2d(&bad, &idx).is_err());
    }

    #[test]
    fn pool_indices_reject_foreign_window() {
        assert!(PoolIndices::new([1, 1, 4, 4], vec![0, 0, 8, 10]).is_err());
        assert!(PoolIndices::new([1, 1, 4, 4], vec![0, 2, 8, 10]).is_ok());
    }

    #[test]
    fn unpool_of_pool_keeps_only_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[2, 2, 4, 6], &mut rng).map(|v| v + 2.0);
        let (y, idx) = maxpool2d(&x).unwrap();
        let u = maxunpool2d(&y, &idx).unwrap();
        for (o, &v) in u.data().iter().enumerate() {
            if idx.offsets().contains(&o) {
                assert_eq!(v, x.data()[o]);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let eq = Tensor::<f64>::new(&[1, 2, 1, 1], vec![0.3, 0.3]).unwrap();
        assert_eq!(softmax_channels(&eq).unwrap().data(), &[0.5, 0.5]);

        let sat = Tensor::<f64>::new(&[1, 2, 1, 1], vec![-10.0, 10.0]).unwrap();
        assert!(softmax_channels(&sat).unwrap().data()[1] > 1.0 - 1e-8);

        let one = Tensor::<f64>::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let p = softmax_channels(&one).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[2, 2, 3, 3], &mut rng).scale(5.0);
        let p = softmax_channels(&x).unwrap();
        let q = softmax_channels(&x.add_scalar(17.0)).unwrap();
        for i in 0..18 {
            let s = p.data()[(i / 9) * 18 + i % 9] + p.data()[(i / 9) * 18 + 9 + i % 9];
            assert!((s - 1.0).abs() < 1e-6);
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn probs(vessel: &[f64]) -> Tensor<f64> {
        let mut data: Vec<f64> = vessel.iter().map(|v| 1.0 - v).collect();
        data.extend_from_slice(vessel);
        Tensor::new(&[1, 2, 1, vessel.len()], data).unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        let perfect = probs(&[1.0, 0.0]);
        let l = weighted_cross_entropy(&perfect, &[1, 0], &[3.0, 7.0], &[1, 1]).unwrap();
        assert_eq!(l, 0.0);

        let uniform = probs(&[0.5, 0.5, 0.5]);
        let l = weighted_cross_entropy(&uniform, &[1, 0, 0], &[1.0, 1.0], &[1, 1, 1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let single = probs(&[0.5]);
        let l = weighted_cross_entropy(&single, &[1], &[1.0, 5.0], &[1]).unwrap();
        assert!((l - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn loss_ignores_pixels_outside_fov_and_clamps() {
        let p = probs(&[0.0, 0.5]);
        // pixel 0 is a vessel with probability 0 but sits outside the FOV
        let l = weighted_cross_entropy(&p, &[1, 1], &[1.0, 1.0], &[0, 1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let clamped = weighted_cross_entropy(&p, &[1, 1], &[1.0, 1.0], &[1, 0]).unwrap();
        assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(weighted_cross_entropy(&p, &[1, 1], &[1.0, 1.0], &[0, 0]).is_err());
    }

    #[test]
    fn unit_weights_equal_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..0.99)).collect();
        let target: Vec<u8> = (0..20).map(|_| rng.gen_range(0..2)).collect();
        let fov = vec![1u8; 20];
        let p = probs(&v);
        let weighted = weighted_cross_entropy(&p, &target, &[1.0, 1.0], &fov).unwrap();
        let plain: f64 = -target
            .iter()
            .zip(&v)
            .map(|(&t, &q)| if t == 1 { q.ln() } else { (1.0 - q).ln() })
            .sum::<f64>()
            / 20.0;
        assert_eq!(weighted, plain);
    }
}
