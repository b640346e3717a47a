//! CNN building blocks with hand-written forward and backward passes.
//!
//! Every layer caches what its backward pass needs during forward. The
//! backward pass takes the gradient w.r.t. its output and returns the
//! gradient w.r.t. its input, accumulating parameter gradients internally.
//! Batched tensors are shaped (B, C, H, W) for the convolutional stage and
//! (B, F) for the fully connected stage, row-major.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train vs inference behavior (batch-norm statistics, dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Uniform init scaled by 1/sqrt(fan_in).
fn init_uniform(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// 3x3 convolution, stride 1, zero padding 1; spatial size is preserved.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernels, shape (out, in, 3, 3) row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cached_shape: Option<(usize, usize, usize)>,
    cached_cols: Option<Vec<f64>>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * 9;
        Self {
            in_channels,
            out_channels,
            weight: init_uniform(rng, out_channels * in_channels * 9, fan_in),
            bias: init_uniform(rng, out_channels, fan_in),
            grad_weight: vec![0.0; out_channels * in_channels * 9],
            grad_bias: vec![0.0; out_channels],
            cached_shape: None,
            cached_cols: None,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        match input.shape.as_slice() {
            [b, c, h, w] if *c == self.in_channels => Ok((*b, *h, *w)),
            other => Err(Error::InvalidArgument(format!(
                "conv2d expected (B, {}, H, W), got {:?}",
                self.in_channels, other
            ))),
        }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (b, h, w) = self.check_input(input)?;
        let (ic, oc) = (self.in_channels, self.out_channels);
        let plane = h * w;
        let kin = 9 * ic;
        // unfold every sample once, position-major: row x holds the 9*C_in
        // window values feeding output position x. The column matrices are
        // reused by both gradient computations in backward.
        let mut cols = vec![0.0; b * plane * kin];
        cols.par_chunks_mut(plane * kin)
            .enumerate()
            .for_each(|(bi, col)| {
                im2col(&input.data[bi * ic * plane..(bi + 1) * ic * plane], ic, h, w, col);
            });
        let mut out = Tensor::zeros(&[b, oc, h, w]);
        out.data
            .par_chunks_mut(oc * plane)
            .enumerate()
            .for_each(|(bi, out_s)| {
                let col = &cols[bi * plane * kin..(bi + 1) * plane * kin];
                for o in 0..oc {
                    let w_row = &self.weight[o * kin..(o + 1) * kin];
                    let bias = self.bias[o];
                    let out_p = &mut out_s[o * plane..(o + 1) * plane];
                    for (x, dst) in out_p.iter_mut().enumerate() {
                        *dst = bias + dot(w_row, &col[x * kin..(x + 1) * kin]);
                    }
                }
            });
        self.cached_shape = Some((b, h, w));
        self.cached_cols = Some(cols);
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (b, h, w) = self.cached_shape.expect("forward must run before backward");
        let cols = self.cached_cols.as_ref().unwrap();
        let (ic, oc) = (self.in_channels, self.out_channels);
        let plane = h * w;
        let kin = 9 * ic;
        debug_assert_eq!(grad_out.shape, vec![b, oc, h, w]);

        // parameter gradients: parallel over output channel, sequential
        // over batch and position within each channel for determinism
        self.grad_weight
            .par_chunks_mut(kin)
            .zip(self.grad_bias.par_iter_mut())
            .enumerate()
            .for_each(|(o, (gw, gb))| {
                for bi in 0..b {
                    let go = &grad_out.data[(bi * oc + o) * plane..(bi * oc + o + 1) * plane];
                    *gb += go.iter().sum::<f64>();
                    let col = &cols[bi * plane * kin..(bi + 1) * plane * kin];
                    for (x, &g) in go.iter().enumerate() {
                        if g != 0.0 {
                            axpy(g, &col[x * kin..(x + 1) * kin], gw);
                        }
                    }
                }
            });

        // input gradient: fold W^T * grad_out back onto the image
        let mut grad_in = Tensor::zeros(&[b, ic, h, w]);
        grad_in
            .data
            .par_chunks_mut(ic * plane)
            .enumerate()
            .for_each(|(bi, gi_s)| {
                let mut col_grad = vec![0.0; plane * kin];
                for o in 0..oc {
                    let go = &grad_out.data[(bi * oc + o) * plane..(bi * oc + o + 1) * plane];
                    let w_row = &self.weight[o * kin..(o + 1) * kin];
                    for (x, &g) in go.iter().enumerate() {
                        if g != 0.0 {
                            axpy(g, w_row, &mut col_grad[x * kin..(x + 1) * kin]);
                        }
                    }
                }
                col2im(&col_grad, ic, h, w, gi_s);
            });
        Ok(grad_in)
    }
}

/// Dot product with four independent accumulators (fixed summation order,
/// better instruction-level parallelism than a single chain).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// y += alpha * x (element-wise, auto-vectorizable).
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (dst, &src) in y.iter_mut().zip(x) {
        *dst += alpha * src;
    }
}

/// Bounds of the valid (unpadded) window for a kernel tap offset:
/// output positions o in [lo, hi) read input position o + off.
fn tap_window(extent: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((extent as isize - off).min(extent as isize)).max(0) as usize;
    (lo, hi)
}

/// Unfold one (C, H, W) sample into a position-major (H*W, 9C) column
/// matrix: entry (y*w + x, c*9 + dy*3 + dx) holds input[c][y+dy-1][x+dx-1],
/// zero where the 3x3 window leaves the image.
fn im2col(input: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let plane = h * w;
    let kin = 9 * c;
    for i in 0..c {
        let img = &input[i * plane..(i + 1) * plane];
        for dy in 0..3usize {
            let oy = dy as isize - 1;
            let (y_lo, y_hi) = tap_window(h, oy);
            for dx in 0..3usize {
                let ox = dx as isize - 1;
                let (x_lo, x_hi) = tap_window(w, ox);
                let tap = i * 9 + dy * 3 + dx;
                for y in y_lo..y_hi {
                    let sy = (y as isize + oy) as usize;
                    let src = sy * w + (x_lo as isize + ox) as usize;
                    for x in x_lo..x_hi {
                        col[(y * w + x) * kin + tap] = img[src + (x - x_lo)];
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add a position-major (H*W, 9C)
/// column-matrix gradient back onto the (C, H, W) image gradient.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, grad: &mut [f64]) {
    let plane = h * w;
    let kin = 9 * c;
    for i in 0..c {
        let img = &mut grad[i * plane..(i + 1) * plane];
        for dy in 0..3usize {
            let oy = dy as isize - 1;
            let (y_lo, y_hi) = tap_window(h, oy);
            for dx in 0..3usize {
                let ox = dx as isize - 1;
                let (x_lo, x_hi) = tap_window(w, ox);
                let tap = i * 9 + dy * 3 + dx;
                for y in y_lo..y_hi {
                    let sy = (y as isize + oy) as usize;
                    let base = sy * w + (x_lo as isize + ox) as usize;
                    for x in x_lo..x_hi {
                        img[base + (x - x_lo)] += col[(y * w + x) * kin + tap];
                    }
                }
            }
        }
    }
}

/// Batch normalization over per-channel statistics.
///
/// For 4D inputs the statistics pool (B, H, W) per channel; for 2D inputs
/// they pool the batch per feature.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            epsilon: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    /// (batch, spatial) extents for the supported input shapes.
    fn extents(&self, input: &Tensor) -> Result<(usize, usize)> {
        match input.shape.as_slice() {
            [b, c, h, w] if *c == self.channels => Ok((*b, h * w)),
            [b, f] if *f == self.channels => Ok((*b, 1)),
            other => Err(Error::InvalidArgument(format!(
                "batchnorm over {} channels cannot take shape {:?}",
                self.channels, other
            ))),
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, s) = self.extents(input)?;
        if mode == Mode::Train && b < 2 {
            return Err(Error::InvalidArgument(
                "batch normalization needs a batch of at least 2 in train mode".into(),
            ));
        }
        let c = self.channels;
        let m = (b * s) as f64;
        let mut out = Tensor::zeros(&input.shape);
        let mut xhat = vec![0.0; input.len()];
        let mut inv_std = vec![0.0; c];
        let at = |bi: usize, ci: usize, si: usize| (bi * c + ci) * s + si;
        for ci in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = 0.0;
                    for bi in 0..b {
                        for si in 0..s {
                            mean += input.data[at(bi, ci, si)];
                        }
                    }
                    mean /= m;
                    let mut var = 0.0;
                    for bi in 0..b {
                        for si in 0..s {
                            let d = input.data[at(bi, ci, si)] - mean;
                            var += d * d;
                        }
                    }
                    var /= m;
                    self.running_mean[ci] =
                        (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                    self.running_var[ci] =
                        (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
                    (mean, var)
                }
                Mode::Infer => (self.running_mean[ci], self.running_var[ci]),
            };
            let istd = 1.0 / (var + self.epsilon).sqrt();
            inv_std[ci] = istd;
            let (g, be) = (self.gamma[ci], self.beta[ci]);
            for bi in 0..b {
                for si in 0..s {
                    let i = at(bi, ci, si);
                    let xh = (input.data[i] - mean) * istd;
                    xhat[i] = xh;
                    out.data[i] = g * xh + be;
                }
            }
        }
        self.cache = Some(BnCache {
            shape: input.shape.clone(),
            xhat,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().expect("forward must run before backward");
        debug_assert_eq!(grad_out.shape, cache.shape);
        let (b, s) = self.extents(grad_out)?;
        let c = self.channels;
        let m = (b * s) as f64;
        let mut grad_in = Tensor::zeros(&grad_out.shape);
        let at = |bi: usize, ci: usize, si: usize| (bi * c + ci) * s + si;
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for bi in 0..b {
                for si in 0..s {
                    let i = at(bi, ci, si);
                    sum_g += grad_out.data[i];
                    sum_gx += grad_out.data[i] * cache.xhat[i];
                }
            }
            self.grad_gamma[ci] += sum_gx;
            self.grad_beta[ci] += sum_g;
            let g = self.gamma[ci];
            let istd = cache.inv_std[ci];
            match cache.mode {
                Mode::Train => {
                    for bi in 0..b {
                        for si in 0..s {
                            let i = at(bi, ci, si);
                            grad_in.data[i] = g * istd / m
                                * (m * grad_out.data[i] - sum_g - cache.xhat[i] * sum_gx);
                        }
                    }
                }
                Mode::Infer => {
                    for bi in 0..b {
                        for si in 0..s {
                            let i = at(bi, ci, si);
                            grad_in.data[i] = g * istd * grad_out.data[i];
                        }
                    }
                }
            }
        }
        self.cache = Some(cache);
        Ok(grad_in)
    }
}

/// Elementwise max(0, x).
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Tensor {
        self.mask = input.data.iter().map(|&v| v > 0.0).collect();
        Tensor {
            shape: input.shape.clone(),
            data: input.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        Tensor {
            shape: grad_out.shape.clone(),
            data: grad_out
                .data
                .iter()
                .zip(&self.mask)
                .map(|(&g, &m)| if m { g } else { 0.0 })
                .collect(),
        }
    }
}

/// Non-overlapping 2x2 max pooling with stride 2; odd trailing rows or
/// columns are dropped (floor semantics).
#[derive(Clone, Debug, Default)]
pub struct MaxPool2x2 {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = match input.shape.as_slice() {
            [b, c, h, w] => [*b, *c, *h, *w],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "maxpool expects 4D input, got {other:?}"
                )))
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        self.argmax = vec![0; out.len()];
        self.in_shape = input.shape.clone();
        for bc in 0..b * c {
            let in_p = &input.data[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = (2 * oy) * w + 2 * ox;
                    let mut best = in_p[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if in_p[i] > best {
                            best = in_p[i];
                            best_i = i;
                        }
                    }
                    let o = bc * oh * ow + oy * ow + ox;
                    out.data[o] = best;
                    self.argmax[o] = bc * h * w + best_i;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        let mut grad_in = Tensor::zeros(&self.in_shape);
        for (o, &src) in self.argmax.iter().enumerate() {
            grad_in.data[src] += grad_out.data[o];
        }
        grad_in
    }
}

/// Adaptive average pooling to a fixed (out_h, out_w); bin i covers rows
/// floor(i*H/out_h) .. ceil((i+1)*H/out_h).
#[derive(Clone, Debug)]
pub struct AdaptiveAvgPool {
    pub out_h: usize,
    pub out_w: usize,
    in_shape: Vec<usize>,
}

fn bin_bounds(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = i * n_in / n_out;
    let hi = ((i + 1) * n_in + n_out - 1) / n_out;
    (lo, hi)
}

impl AdaptiveAvgPool {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            in_shape: Vec::new(),
        }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = match input.shape.as_slice() {
            [b, c, h, w] => [*b, *c, *h, *w],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "adaptive pool expects 4D input, got {other:?}"
                )))
            }
        };
        self.in_shape = input.shape.clone();
        let (oh, ow) = (self.out_h, self.out_w);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        for bc in 0..b * c {
            let in_p = &input.data[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = bin_bounds(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = bin_bounds(ox, w, ow);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += in_p[y * w + x];
                        }
                    }
                    out.data[bc * oh * ow + oy * ow + ox] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        let [_, _, h, w] = [
            self.in_shape[0],
            self.in_shape[1],
            self.in_shape[2],
            self.in_shape[3],
        ];
        let (oh, ow) = (self.out_h, self.out_w);
        let bc_total = self.in_shape[0] * self.in_shape[1];
        let mut grad_in = Tensor::zeros(&self.in_shape);
        for bc in 0..bc_total {
            let gi = &mut grad_in.data[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = bin_bounds(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = bin_bounds(ox, w, ow);
                    let g = grad_out.data[bc * oh * ow + oy * ow + ox]
                        / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            gi[y * w + x] += g;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Fully connected layer y = W x + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// (out, in) row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cached_input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: init_uniform(rng, out_features * in_features, in_features),
            bias: init_uniform(rng, out_features, in_features),
            grad_weight: vec![0.0; out_features * in_features],
            grad_bias: vec![0.0; out_features],
            cached_input: None,
        }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let b = match input.shape.as_slice() {
            [b, f] if *f == self.in_features => *b,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "linear expected (B, {}), got {:?}",
                    self.in_features, other
                )))
            }
        };
        let (fi, fo) = (self.in_features, self.out_features);
        let mut out = Tensor::zeros(&[b, fo]);
        out.data
            .par_chunks_mut(fo)
            .enumerate()
            .for_each(|(bi, out_row)| {
                let x = &input.data[bi * fi..(bi + 1) * fi];
                for (o, out_v) in out_row.iter_mut().enumerate() {
                    let wrow = &self.weight[o * fi..(o + 1) * fi];
                    let mut acc = self.bias[o];
                    for (wv, xv) in wrow.iter().zip(x) {
                        acc += wv * xv;
                    }
                    *out_v = acc;
                }
            });
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .expect("forward must run before backward");
        let b = input.shape[0];
        let (fi, fo) = (self.in_features, self.out_features);
        // weight/bias grads: parallel over output rows
        self.grad_weight
            .par_chunks_mut(fi)
            .zip(self.grad_bias.par_iter_mut())
            .enumerate()
            .for_each(|(o, (gw_row, gb))| {
                for bi in 0..b {
                    let g = grad_out.data[bi * fo + o];
                    *gb += g;
                    let x = &input.data[bi * fi..(bi + 1) * fi];
                    for (gw, xv) in gw_row.iter_mut().zip(x) {
                        *gw += g * xv;
                    }
                }
            });
        // input grad: W^T grad_out
        let mut grad_in = Tensor::zeros(&[b, fi]);
        grad_in
            .data
            .par_chunks_mut(fi)
            .enumerate()
            .for_each(|(bi, gi_row)| {
                for o in 0..fo {
                    let g = grad_out.data[bi * fo + o];
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &self.weight[o * fi..(o + 1) * fi];
                    for (gi, wv) in gi_row.iter_mut().zip(wrow) {
                        *gi += g * wv;
                    }
                }
            });
        Ok(grad_in)
    }
}

/// Inverted dropout: in train mode zeroes each activation with probability
/// `rate` and scales survivors by 1/(1-rate); identity in inference.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    mask: Vec<f64>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Self {
            rate,
            mask: Vec::new(),
        })
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode, rng: &mut impl Rng) -> Tensor {
        if mode == Mode::Infer || self.rate == 0.0 {
            self.mask = vec![1.0; input.len()];
            return input.clone();
        }
        let keep = 1.0 - self.rate;
        self.mask = (0..input.len())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < self.rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        Tensor {
            shape: input.shape.clone(),
            data: input
                .data
                .iter()
                .zip(&self.mask)
                .map(|(&v, &m)| v * m)
                .collect(),
        }
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        Tensor {
            shape: grad_out.shape.clone(),
            data: grad_out
                .data
                .iter()
                .zip(&self.mask)
                .map(|(&g, &m)| g * m)
                .collect(),
        }
    }
}

/// Row-wise softmax over a (B, F) tensor.
#[derive(Clone, Debug, Default)]
pub struct Softmax {
    output: Vec<f64>,
    features: usize,
}

impl Softmax {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Tensor {
        let f = *input.shape.last().expect("non-scalar input");
        let mut data = input.data.clone();
        for row in data.chunks_mut(f) {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.output = data.clone();
        self.features = f;
        Tensor {
            shape: input.shape.clone(),
            data,
        }
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        let f = self.features;
        let mut grad_in = vec![0.0; grad_out.len()];
        for (row, (gi, go)) in grad_in
            .chunks_mut(f)
            .zip(grad_out.data.chunks(f))
            .enumerate()
            .map(|(r, pair)| (r, pair))
        {
            let y = &self.output[row * f..(row + 1) * f];
            let dot: f64 = y.iter().zip(go).map(|(&yi, &gi)| yi * gi).sum();
            for i in 0..f {
                gi[i] = y[i] * (go[i] - dot);
            }
        }
        Tensor {
            shape: grad_out.shape.clone(),
            data: grad_in,
        }
    }
}

/// Mean squared error over all batch elements and coordinates.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::InvalidArgument(format!(
            "mse shape mismatch: {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse_loss`] w.r.t. the predictions.
pub fn mse_loss_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape != target.shape {
        return Err(Error::InvalidArgument(format!(
            "mse shape mismatch: {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let n = pred.len() as f64;
    Ok(Tensor {
        shape: pred.shape.clone(),
        data: pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| 2.0 * (p - t) / n)
            .collect(),
    })
}
