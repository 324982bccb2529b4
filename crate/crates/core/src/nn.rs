//! Minimal double-precision layers with hand-written backward passes.
//!
//! Tensors are stored channel-major (C, H, W). Every convolution is stride 1
//! with "same" zero padding so spatial shapes are preserved.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Real activations of shape H×W×C, stored as C planes of H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape("tensor dimensions must be at least 1"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{}x{}x{} tensor needs {} values, got {}",
                height,
                width,
                channels,
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureTensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn add_assign(&mut self, other: &FeatureTensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> FeatureTensor {
        FeatureTensor {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureTensor {
        FeatureTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Stack the channels of `self` and `other` (same spatial size).
    pub fn concat_channels(&self, other: &FeatureTensor) -> FeatureTensor {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureTensor {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Split off the first `first` channels.
    pub fn split_channels(&self, first: usize) -> (FeatureTensor, FeatureTensor) {
        let n = first * self.plane_len();
        (
            FeatureTensor {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..n].to_vec(),
            },
            FeatureTensor {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[n..].to_vec(),
            },
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Visitor over named parameter buffers, used for optimisers, checkpoints and
/// gradient accumulation. Visiting order is stable for a given architecture.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn zero_params(&mut self) {
        self.visit_mut("", &mut |_, p| p.iter_mut().for_each(|v| *v = 0.0));
    }

    /// `self += other` buffer by buffer (same architecture).
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let mut bufs = Vec::new();
        other.visit("", &mut |_, p| bufs.push(p.to_vec()));
        let mut it = bufs.into_iter();
        self.visit_mut("", &mut |_, p| {
            let b = it.next().expect("architecture mismatch");
            for (a, v) in p.iter_mut().zip(b) {
                *a += v;
            }
        });
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Square-kernel convolution, stride 1, zero "same" padding (odd kernels).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Layout (out, in, ky, kx).
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, kernel);
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        c.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        c
    }

    /// 1×1 identity mapping (requires in == out).
    pub fn identity(channels: usize) -> Self {
        let mut c = Self::zeros(channels, channels, 1);
        for i in 0..channels {
            c.weight[i * channels + i] = 1.0;
        }
        c
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    fn check_input(&self, x: &FeatureTensor) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        self.check_input(x)?;
        let (h, w) = (x.height, x.width);
        let pad = (self.kernel / 2) as isize;
        let mut out = FeatureTensor::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let bias = self.bias[o];
            let out_plane = out.plane_mut(o);
            out_plane.iter_mut().for_each(|v| *v = bias);
            for i in 0..self.in_channels {
                let in_plane = x.plane(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = self.weight[self.w_index(o, i, ky, kx)];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &in_plane[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulate parameter gradients into `grad` and return the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &FeatureTensor,
        grad_out: &FeatureTensor,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<FeatureTensor> {
        let (h, w) = (x.height, x.width);
        let pad = (self.kernel / 2) as isize;
        let mut grad_in = need_input_grad.then(|| FeatureTensor::zeros(self.in_channels, h, w));
        for o in 0..self.out_channels {
            let g_plane = grad_out.plane(o);
            grad.bias[o] += g_plane.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let in_plane = x.plane(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wi = self.w_index(o, i, ky, kx);
                        let wv = self.weight[wi];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let off = sy * w + (x0 as isize + dx) as usize;
                            let src = &in_plane[off..off + (x1 - x0)];
                            let g = &g_plane[y * w + x0..y * w + x1];
                            acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let dst = &mut gi.plane_mut(i)[off..off + (x1 - x0)];
                                for (d, gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        grad.weight[wi] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

/// Output rows `y` for which `y + d` is inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(n), hi)
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected layer, weight layout (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_features, out_features);
        let bound = (1.0 / in_features as f64).sqrt();
        l.weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..bound));
        l
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_features)
            .map(|o| {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                self.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_features];
        for o in 0..self.out_features {
            let g = grad_out[o];
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut grad.weight[o * self.in_features..(o + 1) * self.in_features];
            for i in 0..self.in_features {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Batch normalisation in inference form: per-channel
/// `gamma * (x - mean) / sqrt(var + eps) + beta` with frozen statistics.
/// Only `gamma` and `beta` are trainable. Defaults to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    fn scale(&self, c: usize) -> f64 {
        self.gamma[c] / (self.running_var[c] + self.eps).sqrt()
    }

    pub fn forward(&self, x: &FeatureTensor) -> FeatureTensor {
        let mut out = x.clone();
        for c in 0..x.channels {
            let (s, m, b) = (self.scale(c), self.running_mean[c], self.beta[c]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = s * (*v - m) + b);
        }
        out
    }

    pub fn backward(
        &self,
        x: &FeatureTensor,
        grad_out: &FeatureTensor,
        grad: &mut BatchNorm,
    ) -> FeatureTensor {
        let mut grad_in = grad_out.clone();
        for c in 0..x.channels {
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            let m = self.running_mean[c];
            let g = grad_out.plane(c);
            grad.beta[c] += g.iter().sum::<f64>();
            grad.gamma[c] += g
                .iter()
                .zip(x.plane(c))
                .map(|(gv, xv)| gv * (xv - m) * inv)
                .sum::<f64>();
            let s = self.scale(c);
            grad_in.plane_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        grad_in
    }
}

impl Parameterized for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// 2×2 max pooling, stride 2 (odd trailing rows/columns dropped).
pub fn max_pool2(x: &FeatureTensor) -> (FeatureTensor, Vec<usize>) {
    let (oh, ow) = ((x.height / 2).max(1), (x.width / 2).max(1));
    let mut out = FeatureTensor::zeros(x.channels, oh, ow);
    let mut argmax = vec![0usize; out.data.len()];
    for c in 0..x.channels {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2.min(x.height) {
                    for dx in 0..2.min(x.width) {
                        let i = x.idx(c, 2 * y + dy, 2 * xx + dx);
                        if x.data[i] > best {
                            best = x.data[i];
                            bi = i;
                        }
                    }
                }
                let oi = out.idx(c, y, xx);
                out.data[oi] = best;
                argmax[oi] = bi;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward(
    input_shape: (usize, usize, usize),
    argmax: &[usize],
    grad_out: &FeatureTensor,
) -> FeatureTensor {
    let (c, h, w) = input_shape;
    let mut g = FeatureTensor::zeros(c, h, w);
    for (o, &i) in argmax.iter().enumerate() {
        g.data[i] += grad_out.data[o];
    }
    g
}

pub fn global_avg_pool(x: &FeatureTensor) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels)
        .map(|c| x.plane(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(shape: (usize, usize, usize), grad: &[f64]) -> FeatureTensor {
    let (c, h, w) = shape;
    let mut g = FeatureTensor::zeros(c, h, w);
    let n = (h * w) as f64;
    for ch in 0..c {
        let v = grad[ch] / n;
        g.plane_mut(ch).iter_mut().for_each(|x| *x = v);
    }
    g
}
