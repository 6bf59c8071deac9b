//! Small convolutional network substrate: 3×3 conv layers (stride 1, zero
//! padding 1), a global average pool and one dense head.
//!
//! Everything is `f32` and single precision end to end. Reductions run in a
//! fixed order so that training is bit-reproducible for a given seed, even
//! when per-sample gradients are computed on the rayon pool.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};

pub const KERNEL_SIZE: usize = 3;
pub const KERNEL_LEN: usize = KERNEL_SIZE * KERNEL_SIZE;

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite tensor value at {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::None => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f32, a: f32) -> f32 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// A 3×3 convolution kernel stored row-major.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConvKernel(pub [f32; KERNEL_LEN]);

impl ConvKernel {
    pub const ZERO: ConvKernel = ConvKernel([0.0; KERNEL_LEN]);

    pub fn values(&self) -> &[f32; KERNEL_LEN] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn bits_eq(&self, other: &ConvKernel) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn scaled(&self, factor: f32) -> ConvKernel {
        ConvKernel(self.0.map(|v| v * factor))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Indexed `out * in_channels + in`.
    pub kernels: Vec<ConvKernel>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn zeros(out_channels: usize, in_channels: usize, activation: Activation) -> Self {
        Self {
            out_channels,
            in_channels,
            kernels: vec![ConvKernel::ZERO; out_channels * in_channels],
            bias: vec![0.0; out_channels],
            activation,
        }
    }

    #[inline]
    pub fn kernel(&self, out: usize, inp: usize) -> &ConvKernel {
        &self.kernels[out * self.in_channels + inp]
    }

    #[inline]
    pub fn kernel_mut(&mut self, out: usize, inp: usize) -> &mut ConvKernel {
        &mut self.kernels[out * self.in_channels + inp]
    }

    /// All kernels feeding output channel `out`, in input order.
    pub fn output_channel(&self, out: usize) -> &[ConvKernel] {
        &self.kernels[out * self.in_channels..(out + 1) * self.in_channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub out_features: usize,
    pub in_features: usize,
    /// Row-major `out × in`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(out_features: usize, in_features: usize, activation: Activation) -> Self {
        Self {
            out_features,
            in_features,
            weights: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
            activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub activation: Activation,
}

/// Layer widths and activations, without parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input: Shape3,
    pub conv: Vec<ConvSpec>,
    pub classes: usize,
    pub head_activation: Activation,
}

impl Architecture {
    pub fn relu(input: Shape3, widths: &[usize], classes: usize) -> Self {
        Self {
            input,
            conv: widths.iter().map(|&channels| ConvSpec { channels, activation: Activation::Relu }).collect(),
            classes,
            head_activation: Activation::None,
        }
    }

    /// Default carrier: two conv layers of 4 and 8 channels on 1×12×12 inputs.
    pub fn carrier_default() -> Self {
        Self::relu(Shape3::new(1, 12, 12), &[4, 8], 4)
    }

    /// Default host: three conv layers of 8, 16 and 16 channels.
    pub fn host_default() -> Self {
        Self::relu(Shape3::new(1, 12, 12), &[8, 16, 16], 4)
    }

    /// In-channel count feeding conv layer `layer`.
    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input.channels
        } else {
            self.conv[layer - 1].channels
        }
    }

    /// Total number of conv kernels (the `N` of the embedding).
    pub fn kernel_count(&self) -> usize {
        (0..self.conv.len()).map(|l| self.conv[l].channels * self.in_channels(l)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub input_shape: Shape3,
    pub conv_layers: Vec<ConvLayer>,
    pub head: DenseLayer,
}

impl Model {
    /// He-normal conv kernels and Xavier-normal head, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv_layers = Vec::with_capacity(arch.conv.len());
        for (l, spec) in arch.conv.iter().enumerate() {
            let in_ch = arch.in_channels(l);
            let std = (2.0 / (in_ch * KERNEL_LEN) as f32).sqrt();
            let normal = Normal::new(0.0f32, std).expect("valid std");
            let mut layer = ConvLayer::zeros(spec.channels, in_ch, spec.activation);
            for k in layer.kernels.iter_mut() {
                for v in k.0.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
            conv_layers.push(layer);
        }
        let in_features = arch.conv.last().map_or(arch.input.channels, |c| c.channels);
        let std = (2.0 / (in_features + arch.classes) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let mut head = DenseLayer::zeros(arch.classes, in_features, arch.head_activation);
        for w in head.weights.iter_mut() {
            *w = normal.sample(&mut rng);
        }
        Self { input_shape: arch.input, conv_layers, head }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.input_shape,
            conv: self
                .conv_layers
                .iter()
                .map(|l| ConvSpec { channels: l.out_channels, activation: l.activation })
                .collect(),
            classes: self.head.out_features,
            head_activation: self.head.activation,
        }
    }

    pub fn class_count(&self) -> usize {
        self.head.out_features
    }

    pub fn kernel_count(&self) -> usize {
        self.conv_layers.iter().map(|l| l.kernels.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_layers.iter().map(|l| l.kernels.len() * KERNEL_LEN + l.bias.len()).sum::<usize>()
            + self.head.weights.len()
            + self.head.bias.len()
    }

    /// Checks channel chaining and buffer lengths.
    pub fn validate(&self) -> Result<()> {
        let mut in_ch = self.input_shape.channels;
        for (l, layer) in self.conv_layers.iter().enumerate() {
            if layer.in_channels != in_ch {
                return Err(Error::Structure(format!(
                    "conv layer {l} expects {} input channels, previous layer yields {in_ch}",
                    layer.in_channels
                )));
            }
            if layer.kernels.len() != layer.out_channels * layer.in_channels || layer.bias.len() != layer.out_channels {
                return Err(Error::Structure(format!("conv layer {l} buffers do not match its shape")));
            }
            in_ch = layer.out_channels;
        }
        if self.head.in_features != in_ch
            || self.head.weights.len() != self.head.in_features * self.head.out_features
            || self.head.bias.len() != self.head.out_features
        {
            return Err(Error::Structure("dense head does not match the last conv layer".into()));
        }
        Ok(())
    }

    /// Visits every parameter value in serialization order: conv kernels,
    /// conv biases, head weights, head bias.
    pub fn for_each_param(&self, mut f: impl FnMut(f32)) {
        for layer in &self.conv_layers {
            layer.kernels.iter().flat_map(|k| k.0.iter()).for_each(|&v| f(v));
        }
        for layer in &self.conv_layers {
            layer.bias.iter().for_each(|&v| f(v));
        }
        self.head.weights.iter().for_each(|&v| f(v));
        self.head.bias.iter().for_each(|&v| f(v));
    }

    /// Mutable counterpart of [`Model::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f32)) {
        for layer in &mut self.conv_layers {
            layer.kernels.iter_mut().flat_map(|k| k.0.iter_mut()).for_each(&mut f);
        }
        for layer in &mut self.conv_layers {
            layer.bias.iter_mut().for_each(&mut f);
        }
        self.head.weights.iter_mut().for_each(&mut f);
        self.head.bias.iter_mut().for_each(&mut f);
    }

    pub fn params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.for_each_param(|v| out.push(v));
        out
    }

    /// Bitwise parameter equality (distinguishes `0.0` from `-0.0`).
    pub fn bits_eq(&self, other: &Model) -> bool {
        self.architecture() == other.architecture()
            && self.params().iter().zip(other.params().iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Vec<f32>> {
        self.check_input(input)?;
        Ok(self.forward_cached(input.data()).logits)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.dims().as_slice() {
            return Err(Error::ShapeMismatch { expected: self.input_shape.dims(), found: input.shape().to_vec() });
        }
        Ok(())
    }

    fn forward_cached(&self, input: &[f32]) -> ForwardCache {
        let (h, w) = (self.input_shape.height, self.input_shape.width);
        let plane = h * w;
        let mut pre = Vec::with_capacity(self.conv_layers.len());
        let mut post: Vec<Vec<f32>> = Vec::with_capacity(self.conv_layers.len());
        for layer in &self.conv_layers {
            let x = post.last().map_or(input, |v| v.as_slice());
            let mut z = vec![0.0f32; layer.out_channels * plane];
            for o in 0..layer.out_channels {
                let out_plane = &mut z[o * plane..(o + 1) * plane];
                out_plane.fill(layer.bias[o]);
                for i in 0..layer.in_channels {
                    conv_accumulate(&x[i * plane..(i + 1) * plane], layer.kernel(o, i), out_plane, h, w);
                }
            }
            let a: Vec<f32> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        let last = post.last().map_or(input, |v| v.as_slice());
        let channels = self.head.in_features;
        let pooled: Vec<f32> =
            (0..channels).map(|c| last[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32).collect();
        let head_pre: Vec<f32> = (0..self.head.out_features)
            .map(|o| {
                let row = &self.head.weights[o * channels..(o + 1) * channels];
                row.iter().zip(pooled.iter()).fold(self.head.bias[o], |acc, (w, p)| acc + w * p)
            })
            .collect();
        let logits = head_pre.iter().map(|&z| self.head.activation.apply(z)).collect();
        ForwardCache { pre, post, pooled, head_pre, logits }
    }

    /// Gradients of the softmax cross-entropy loss for one sample.
    pub fn backward(&self, input: &Tensor, target: usize) -> Result<Gradients> {
        self.check_input(input)?;
        if target >= self.class_count() {
            return Err(Error::InvalidClass { class: target, classes: self.class_count() });
        }
        Ok(self.backward_raw(input.data(), target).0)
    }

    fn backward_raw(&self, input: &[f32], target: usize) -> (Gradients, f32) {
        let cache = self.forward_cached(input);
        let (h, w) = (self.input_shape.height, self.input_shape.width);
        let plane = h * w;
        let mut grads = Gradients::zeros_like(self);

        let (probs, loss) = softmax_xent(&cache.logits, target);
        let channels = self.head.in_features;
        let mut d_pooled = vec![0.0f32; channels];
        for (o, &p) in probs.iter().enumerate() {
            let mut dz = p - if o == target { 1.0 } else { 0.0 };
            dz *= self.head.activation.derivative(cache.head_pre[o], cache.logits[o]);
            grads.head_bias[o] = dz;
            let row = &self.head.weights[o * channels..(o + 1) * channels];
            let grow = &mut grads.head_weights[o * channels..(o + 1) * channels];
            for c in 0..channels {
                grow[c] = dz * cache.pooled[c];
                d_pooled[c] += dz * row[c];
            }
        }

        // Gradient w.r.t. the post-activation output of the last conv layer.
        let mut d_post: Vec<f32> = Vec::with_capacity(channels * plane);
        for dp in &d_pooled {
            let g = dp / plane as f32;
            d_post.extend(std::iter::repeat_n(g, plane));
        }

        for l in (0..self.conv_layers.len()).rev() {
            let layer = &self.conv_layers[l];
            let z = &cache.pre[l];
            let a = &cache.post[l];
            let dz: Vec<f32> = d_post
                .iter()
                .zip(z.iter().zip(a.iter()))
                .map(|(&g, (&zv, &av))| g * layer.activation.derivative(zv, av))
                .collect();
            let x = if l == 0 { input } else { cache.post[l - 1].as_slice() };
            let mut d_in = if l > 0 { vec![0.0f32; layer.in_channels * plane] } else { Vec::new() };
            let glayer = &mut grads.conv[l];
            for o in 0..layer.out_channels {
                let dz_plane = &dz[o * plane..(o + 1) * plane];
                glayer.bias[o] = dz_plane.iter().sum();
                for i in 0..layer.in_channels {
                    let x_plane = &x[i * plane..(i + 1) * plane];
                    conv_weight_grad(x_plane, dz_plane, &mut glayer.kernels[o * layer.in_channels + i], h, w);
                    if l > 0 {
                        conv_input_grad(dz_plane, layer.kernel(o, i), &mut d_in[i * plane..(i + 1) * plane], h, w);
                    }
                }
            }
            d_post = d_in;
        }
        (grads, loss)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(&self.forward(input)?))
    }
}

struct ForwardCache {
    pre: Vec<Vec<f32>>,
    post: Vec<Vec<f32>>,
    pooled: Vec<f32>,
    head_pre: Vec<f32>,
    logits: Vec<f32>,
}

/// Valid row range `[lo, hi)` for output rows when reading at offset `d`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// `out[y][x] += Σ k[ky][kx] · inp[y+ky-1][x+kx-1]` with zero padding.
#[inline]
fn conv_accumulate(inp: &[f32], kernel: &ConvKernel, out: &mut [f32], h: usize, w: usize) {
    for ky in 0..KERNEL_SIZE {
        let dy = ky as isize - 1;
        let (y0, y1) = valid_range(dy, h);
        for kx in 0..KERNEL_SIZE {
            let dx = kx as isize - 1;
            let wt = kernel.0[ky * KERNEL_SIZE + kx];
            let (x0, x1) = valid_range(dx, w);
            for y in y0..y1 {
                let src_row = ((y as isize + dy) as usize) * w;
                let dst = &mut out[y * w + x0..y * w + x1];
                let src = &inp
                    [(src_row as isize + x0 as isize + dx) as usize..(src_row as isize + x1 as isize + dx) as usize];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
}

#[inline]
fn conv_weight_grad(inp: &[f32], dz: &[f32], grad: &mut ConvKernel, h: usize, w: usize) {
    for ky in 0..KERNEL_SIZE {
        let dy = ky as isize - 1;
        let (y0, y1) = valid_range(dy, h);
        for kx in 0..KERNEL_SIZE {
            let dx = kx as isize - 1;
            let (x0, x1) = valid_range(dx, w);
            let mut acc = 0.0f32;
            for y in y0..y1 {
                let src_row = ((y as isize + dy) as usize) * w;
                let g = &dz[y * w + x0..y * w + x1];
                let s = &inp
                    [(src_row as isize + x0 as isize + dx) as usize..(src_row as isize + x1 as isize + dx) as usize];
                acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f32>();
            }
            grad.0[ky * KERNEL_SIZE + kx] = acc;
        }
    }
}

#[inline]
fn conv_input_grad(dz: &[f32], kernel: &ConvKernel, d_in: &mut [f32], h: usize, w: usize) {
    for ky in 0..KERNEL_SIZE {
        let dy = ky as isize - 1;
        let (y0, y1) = valid_range(dy, h);
        for kx in 0..KERNEL_SIZE {
            let dx = kx as isize - 1;
            let wt = kernel.0[ky * KERNEL_SIZE + kx];
            let (x0, x1) = valid_range(dx, w);
            for y in y0..y1 {
                let src_row = ((y as isize + dy) as usize) * w;
                let g = &dz[y * w + x0..y * w + x1];
                let dst = &mut d_in
                    [(src_row as isize + x0 as isize + dx) as usize..(src_row as isize + x1 as isize + dx) as usize];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += wt * gv;
                }
            }
        }
    }
}

fn softmax_xent(logits: &[f32], target: usize) -> (Vec<f32>, f32) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let probs: Vec<f32> = exps.iter().map(|e| e / sum).collect();
    let loss = -((logits[target] - max) - sum.ln());
    (probs, loss)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub kernels: Vec<ConvKernel>,
    pub bias: Vec<f32>,
}

/// Parameter gradients, addressed exactly like [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub conv: Vec<ConvGrad>,
    pub head_weights: Vec<f32>,
    pub head_bias: Vec<f32>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            conv: model
                .conv_layers
                .iter()
                .map(|l| ConvGrad { kernels: vec![ConvKernel::ZERO; l.kernels.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
            head_weights: vec![0.0; model.head.weights.len()],
            head_bias: vec![0.0; model.head.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            for (ka, kb) in a.kernels.iter_mut().zip(&b.kernels) {
                for (x, y) in ka.0.iter_mut().zip(kb.0.iter()) {
                    *x += y;
                }
            }
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        self.head_weights.iter_mut().zip(&other.head_weights).for_each(|(x, y)| *x += y);
        self.head_bias.iter_mut().zip(&other.head_bias).for_each(|(x, y)| *x += y);
    }

    fn scale(&mut self, s: f32) {
        for g in &mut self.conv {
            g.kernels.iter_mut().flat_map(|k| k.0.iter_mut()).for_each(|x| *x *= s);
            g.bias.iter_mut().for_each(|x| *x *= s);
        }
        self.head_weights.iter_mut().for_each(|x| *x *= s);
        self.head_bias.iter_mut().for_each(|x| *x *= s);
    }

    /// Flattened in the same order as [`Model::params`].
    pub fn values(&self) -> Vec<f32> {
        let mut out: Vec<f32> = self.conv.iter().flat_map(|g| g.kernels.iter().flat_map(|k| k.0)).collect();
        out.extend(self.conv.iter().flat_map(|g| g.bias.iter().copied()));
        out.extend_from_slice(&self.head_weights);
        out.extend_from_slice(&self.head_bias);
        out
    }

    pub fn max_abs(&self) -> f32 {
        let mut m = 0.0f32;
        for g in &self.conv {
            g.kernels.iter().flat_map(|k| k.0.iter()).for_each(|x| m = m.max(x.abs()));
            g.bias.iter().for_each(|x| m = m.max(x.abs()));
        }
        self.head_weights.iter().chain(&self.head_bias).for_each(|x| m = m.max(x.abs()));
        m
    }

    fn matches(&self, model: &Model) -> bool {
        self.conv.len() == model.conv_layers.len()
            && self
                .conv
                .iter()
                .zip(&model.conv_layers)
                .all(|(g, l)| g.kernels.len() == l.kernels.len() && g.bias.len() == l.bias.len())
            && self.head_weights.len() == model.head.weights.len()
            && self.head_bias.len() == model.head.bias.len()
    }
}

/// Per-kernel freeze flags. Biases and the dense head follow `freeze_rest`,
/// which is false unless the mask was built with [`FreezeMask::all`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FreezeMask {
    pub kernels: Vec<Vec<bool>>,
    pub freeze_rest: bool,
}

impl FreezeMask {
    pub fn none(model: &Model) -> Self {
        Self { kernels: model.conv_layers.iter().map(|l| vec![false; l.kernels.len()]).collect(), freeze_rest: false }
    }

    pub fn all(model: &Model) -> Self {
        Self { kernels: model.conv_layers.iter().map(|l| vec![true; l.kernels.len()]).collect(), freeze_rest: true }
    }

    pub fn set(&mut self, layer: usize, out: usize, inp: usize, model: &Model, frozen: bool) -> Result<()> {
        let l = model.conv_layers.get(layer).ok_or_else(|| Error::OutOfRange(format!("layer {layer}")))?;
        if out >= l.out_channels || inp >= l.in_channels {
            return Err(Error::OutOfRange(format!("kernel ({layer}, {out}, {inp})")));
        }
        self.kernels[layer][out * l.in_channels + inp] = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, layer: usize, index: usize) -> bool {
        self.kernels.get(layer).and_then(|l| l.get(index)).copied().unwrap_or(false)
    }

    pub fn frozen_count(&self) -> usize {
        self.kernels.iter().flatten().filter(|&&f| f).count()
    }

    pub fn matches(&self, model: &Model) -> bool {
        self.kernels.len() == model.conv_layers.len()
            && self.kernels.iter().zip(&model.conv_layers).all(|(m, l)| m.len() == l.kernels.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 20, batch_size: 16, weight_decay: 0.0, seed: 0 }
    }
}

impl TrainConfig {
    /// Fine-tuning preset used by the attack simulations.
    pub fn finetune_preset(seed: u64) -> Self {
        Self { learning_rate: 1e-3, epochs: 10, batch_size: 16, weight_decay: 5e-4, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f32,
    pub final_accuracy: f32,
}

/// One SGD update: `p ← p − lr·(g + wd·p)` on every unfrozen parameter.
pub fn sgd_step(model: &Model, grads: &Gradients, config: &TrainConfig, mask: &FreezeMask) -> Result<Model> {
    if !grads.matches(model) || !mask.matches(model) {
        return Err(Error::Structure("gradients or mask do not address this model".into()));
    }
    let mut next = model.clone();
    let lr = config.learning_rate;
    let wd = config.weight_decay;
    let update = |p: &mut f32, g: f32| *p -= lr * (g + wd * *p);
    for (l, (layer, g)) in next.conv_layers.iter_mut().zip(&grads.conv).enumerate() {
        for (idx, (k, gk)) in layer.kernels.iter_mut().zip(&g.kernels).enumerate() {
            if mask.is_frozen(l, idx) {
                continue;
            }
            k.0.iter_mut().zip(gk.0.iter()).for_each(|(p, &gv)| update(p, gv));
        }
        if !mask.freeze_rest {
            layer.bias.iter_mut().zip(&g.bias).for_each(|(p, &gv)| update(p, gv));
        }
    }
    if !mask.freeze_rest {
        next.head.weights.iter_mut().zip(&grads.head_weights).for_each(|(p, &gv)| update(p, gv));
        next.head.bias.iter_mut().zip(&grads.head_bias).for_each(|(p, &gv)| update(p, gv));
    }
    Ok(next)
}

fn check_dataset(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.sample_shape() != model.input_shape.dims().as_slice() {
        return Err(Error::ShapeMismatch { expected: model.input_shape.dims(), found: data.sample_shape().to_vec() });
    }
    if data.class_count() > model.class_count() {
        return Err(Error::InvalidClass { class: data.class_count() - 1, classes: model.class_count() });
    }
    Ok(())
}

/// Mean loss and accuracy over a dataset.
pub fn loss_and_accuracy(model: &Model, data: &Dataset) -> Result<(f32, f32)> {
    check_dataset(model, data)?;
    let per_sample: Vec<(f32, bool)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let logits = model.forward_cached(data.image(i).data()).logits;
            let (_, loss) = softmax_xent(&logits, data.label(i));
            (loss, argmax(&logits) == data.label(i))
        })
        .collect();
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f32>() / data.len() as f32;
    let correct = per_sample.iter().filter(|(_, c)| *c).count();
    Ok((loss, correct as f32 / data.len() as f32))
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<f32> {
    Ok(loss_and_accuracy(model, data)?.1)
}

/// Minibatch SGD. Shuffle order and batching are derived from `config.seed`
/// only, so identical inputs give bit-identical models.
pub fn train(model: &Model, data: &Dataset, config: &TrainConfig, mask: &FreezeMask) -> Result<(Model, TrainReport)> {
    config.validate()?;
    check_dataset(model, data)?;
    if !mask.matches(model) {
        return Err(Error::Structure("freeze mask does not address this model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<(Gradients, f32)> =
                batch.par_iter().map(|&i| current.backward_raw(data.image(i).data(), data.label(i))).collect();
            let mut total = Gradients::zeros_like(&current);
            let mut loss = 0.0f32;
            for (g, l) in &per_sample {
                total.add_assign(g);
                loss += l;
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total.scale(1.0 / batch.len() as f32);
            current = sgd_step(&current, &total, config, mask)?;
        }
    }
    let (final_loss, final_accuracy) = loss_and_accuracy(&current, data)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: config.epochs });
    }
    Ok((current, TrainReport { final_loss, final_accuracy }))
}
