//! Layer kernels with cached forward state for backpropagation.
//!
//! Activations are `[N, C, H, W]` (or `[N, F]` after a dense layer).
//! Per-sample work runs through [`crate::par`]; parameter gradients are
//! reduced over fixed-size sample chunks in index order, so results do not
//! depend on the thread count.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::spec::{ConvSpec, LayerSpec, Shape};
use super::{NnError, Result, Tensor};
use crate::par;

/// Samples per partial sum in parameter-gradient reductions.
const GRAD_CHUNK: usize = 16;

/// Weight initialization. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum Init {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian { std: f64 },
    /// Zero-mean Gaussian with standard deviation `gain / sqrt(fan_in)`.
    FanIn { gain: f64 },
}

impl Init {
    pub fn std(&self, fan_in: usize) -> f64 {
        match *self {
            Init::Gaussian { std } => std,
            Init::FanIn { gain } => gain / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn is_valid(&self) -> bool {
        let v = match *self {
            Init::Gaussian { std } => std,
            Init::FanIn { gain } => gain,
        };
        v > 0.0 && v.is_finite()
    }
}

impl Default for Init {
    fn default() -> Self {
        Init::FanIn { gain: 1.0 }
    }
}

/// Gradients produced by one backward step.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Gradient w.r.t. the layer input; `None` when it was not requested.
    pub input: Option<Tensor>,
    /// One tensor per parameter, in [`Layer::params`] order. Frozen
    /// parameters get all-zero gradients.
    pub params: Vec<Tensor>,
}

fn expect_4d(x: &Tensor, shape: Shape, what: &str) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[1] != shape.c || s[2] != shape.h || s[3] != shape.w {
        return Err(NnError::Shape(format!("{what}: expected [N, {}, {}, {}], got {s:?}", shape.c, shape.h, shape.w)));
    }
    Ok(s[0])
}

fn same_shape(a: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if a.shape() != shape {
        return Err(NnError::Shape(format!("{what}: expected {shape:?}, got {:?}", a.shape())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConvCache {
    batch: usize,
    cols: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub frozen: bool,
    /// `[out, in, k, k]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
    input: Shape,
    output: Shape,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new<R: Rng>(spec: &ConvSpec, input: Shape, init: Init, rng: &mut R) -> Result<Self> {
        let output = LayerSpec::Conv(spec.clone()).output_shape(input)?;
        let wshape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let weight = match &spec.frozen_weights {
            Some(w) => Tensor::new(wshape.to_vec(), w.clone())?,
            None => gaussian(&wshape, init.std(spec.in_channels * spec.kernel * spec.kernel), rng),
        };
        Ok(Self {
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
            frozen: spec.is_frozen(),
            weight,
            bias: Tensor::zeros(&[spec.out_channels]),
            input,
            output,
            cache: None,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.output.h * self.output.w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (h, w) = (self.input.h as isize, self.input.w as isize);
        let (oh, ow) = (self.output.h, self.output.w);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * self.input.h * self.input.w..(c + 1) * self.input.h * self.input.w];
            for ki in 0..k {
                for kj in 0..k {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if y < 0 || y >= h {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.input.w..(y as usize + 1) * self.input.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let xx = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if xx < 0 || xx >= w { 0.0 } else { src[xx as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (h, w) = (self.input.h as isize, self.input.w as isize);
        let (oh, ow) = (self.output.h, self.output.w);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.input.h * self.input.w..(c + 1) * self.input.h * self.input.w];
            for ki in 0..k {
                for kj in 0..k {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= h {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.input.w..(y as usize + 1) * self.input.w];
                        for ox in 0..ow {
                            let xx = (ox * self.stride + kj) as isize - self.pad as isize;
                            if xx >= 0 && xx < w {
                                dst[xx as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let n = expect_4d(x, self.input, "conv input")?;
        let (pl, pos) = (self.patch_len(), self.positions());
        let mut cols = vec![0.0; n * pl * pos];
        let in_len = self.input.len();
        par::for_each_chunk_mut(&mut cols, pl * pos, |i, c| self.im2col(&x.data()[i * in_len..(i + 1) * in_len], c));
        let out_len = self.output.len();
        let mut out = vec![0.0; n * out_len];
        par::for_each_chunk_mut(&mut out, out_len, |i, o| {
            for (ch, plane) in o.chunks_mut(pos).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.data()[ch]);
            }
            gemm(
                self.out_channels,
                pl,
                pos,
                self.weight.data(),
                false,
                &cols[i * pl * pos..(i + 1) * pl * pos],
                false,
                1.0,
                o,
            );
        });
        let out = Tensor::new(vec![n, self.output.c, self.output.h, self.output.w], out)?;
        Ok((out, ConvCache { batch: n, cols }))
    }

    fn backward(&mut self, grad_out: &Tensor, need_input: bool) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(NnError::NoForwardCache("conv"))?;
        let n = cache.batch;
        same_shape(grad_out, &[n, self.output.c, self.output.h, self.output.w], "conv grad")?;
        let (pl, pos, cout) = (self.patch_len(), self.positions(), self.out_channels);
        let g = grad_out.data();
        let params = if self.frozen {
            vec![Tensor::zeros(self.weight.shape()), Tensor::zeros(self.bias.shape())]
        } else {
            let chunks = n.div_ceil(GRAD_CHUNK);
            let partials = par::map_indexed(chunks, |ci| {
                let mut dw = vec![0.0; cout * pl];
                for s in ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(n) {
                    let gs = &g[s * cout * pos..(s + 1) * cout * pos];
                    let cs = &cache.cols[s * pl * pos..(s + 1) * pl * pos];
                    gemm(cout, pos, pl, gs, false, cs, true, 1.0, &mut dw);
                }
                dw
            });
            let mut dw = vec![0.0; cout * pl];
            for p in partials {
                dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            let mut db = vec![0.0; cout];
            for s in 0..n {
                for (ch, plane) in g[s * cout * pos..(s + 1) * cout * pos].chunks(pos).enumerate() {
                    db[ch] += plane.iter().sum::<f64>();
                }
            }
            vec![Tensor::new(self.weight.shape().to_vec(), dw)?, Tensor::new(vec![cout], db)?]
        };
        let input = if need_input {
            let in_len = self.input.len();
            let mut dx = vec![0.0; n * in_len];
            par::for_each_chunk_mut(&mut dx, in_len, |s, d| {
                let mut dcols = vec![0.0; pl * pos];
                gemm(
                    pl,
                    cout,
                    pos,
                    self.weight.data(),
                    true,
                    &g[s * cout * pos..(s + 1) * cout * pos],
                    false,
                    0.0,
                    &mut dcols,
                );
                self.col2im(&dcols, d);
            });
            Some(Tensor::new(vec![n, self.input.c, self.input.h, self.input.w], dx)?)
        } else {
            None
        };
        Ok(Gradients { input, params })
    }
}

fn gaussian<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid init std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    input: Shape,
    output: Shape,
    cache: Option<(usize, Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize, pad: usize, input: Shape) -> Result<Self> {
        let output = LayerSpec::MaxPool { window, stride, pad }.output_shape(input)?;
        Ok(Self { window, stride, pad, input, output, cache: None })
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let n = expect_4d(x, self.input, "maxpool input")?;
        let (in_len, out_len) = (self.input.len(), self.output.len());
        let mut out = vec![0.0; n * out_len];
        let mut arg = vec![0u32; n * out_len];
        // (value, index) pairs keep output and argmax in one parallel pass
        let mut pairs: Vec<(f64, u32)> = vec![(0.0, 0); n * out_len];
        par::for_each_chunk_mut(&mut pairs, out_len, |s, o| {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let (h, w) = (self.input.h as isize, self.input.w as isize);
            for c in 0..self.input.c {
                for oy in 0..self.output.h {
                    for ox in 0..self.output.w {
                        let mut best = (f64::NEG_INFINITY, 0u32);
                        for i in 0..self.window {
                            let y = (oy * self.stride + i) as isize - self.pad as isize;
                            if y < 0 || y >= h {
                                continue;
                            }
                            for j in 0..self.window {
                                let xx = (ox * self.stride + j) as isize - self.pad as isize;
                                if xx < 0 || xx >= w {
                                    continue;
                                }
                                let idx = c * self.input.h * self.input.w + y as usize * self.input.w + xx as usize;
                                // first maximum wins ties
                                if xs[idx] > best.0 {
                                    best = (xs[idx], idx as u32);
                                }
                            }
                        }
                        o[c * self.output.h * self.output.w + oy * self.output.w + ox] = best;
                    }
                }
            }
        });
        for (i, (v, a)) in pairs.into_iter().enumerate() {
            out[i] = v;
            arg[i] = a;
        }
        let out = Tensor::new(vec![n, self.output.c, self.output.h, self.output.w], out)?;
        Ok((out, arg))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Gradients> {
        let (n, arg) = self.cache.take().ok_or(NnError::NoForwardCache("maxpool"))?;
        same_shape(grad_out, &[n, self.output.c, self.output.h, self.output.w], "maxpool grad")?;
        let (in_len, out_len) = (self.input.len(), self.output.len());
        let mut dx = vec![0.0; n * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |s, d| {
            let g = &grad_out.data()[s * out_len..(s + 1) * out_len];
            let a = &arg[s * out_len..(s + 1) * out_len];
            for (gv, &ai) in g.iter().zip(a) {
                d[ai as usize] += gv;
            }
        });
        Ok(Gradients {
            input: Some(Tensor::new(vec![n, self.input.c, self.input.h, self.input.w], dx)?),
            params: vec![],
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    fn run(x: &Tensor) -> Tensor {
        Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Gradients> {
        let out = self.cache.take().ok_or(NnError::NoForwardCache("relu"))?;
        same_shape(grad_out, out.shape(), "relu grad")?;
        let dx = Tensor::from_fn(out.shape(), |i| if out.data()[i] > 0.0 { grad_out.data()[i] } else { 0.0 });
        Ok(Gradients { input: Some(dx), params: vec![] })
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`.
    pub weight: Tensor,
    /// `[outputs]`.
    pub bias: Tensor,
    cache: Option<(Vec<usize>, Tensor)>,
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, init: Init, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: gaussian(&[outputs, inputs], init.std(inputs), rng),
            bias: Tensor::zeros(&[outputs]),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() < 2 || x.sample_len() != self.inputs {
            return Err(NnError::Shape(format!("fc: expected [N, {}], got {:?}", self.inputs, x.shape())));
        }
        let n = x.batch();
        let mut out = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(n, self.inputs, self.outputs, x.data(), false, self.weight.data(), true, 1.0, &mut out);
        Tensor::new(vec![n, self.outputs], out)
    }

    fn backward(&mut self, grad_out: &Tensor, need_input: bool) -> Result<Gradients> {
        let (in_shape, x) = self.cache.take().ok_or(NnError::NoForwardCache("fc"))?;
        let n = x.batch();
        same_shape(grad_out, &[n, self.outputs], "fc grad")?;
        let g = grad_out.data();
        let mut dw = vec![0.0; self.outputs * self.inputs];
        gemm(self.outputs, n, self.inputs, g, true, x.data(), false, 0.0, &mut dw);
        let mut db = vec![0.0; self.outputs];
        for row in g.chunks(self.outputs) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let input = if need_input {
            let mut dx = vec![0.0; n * self.inputs];
            gemm(n, self.outputs, self.inputs, g, false, self.weight.data(), false, 0.0, &mut dx);
            Some(Tensor::new(in_shape, dx)?)
        } else {
            None
        };
        Ok(Gradients {
            input,
            params: vec![Tensor::new(vec![self.outputs, self.inputs], dw)?, Tensor::new(vec![self.outputs], db)?],
        })
    }
}

/// A trainable network layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    MaxPool(MaxPool2d),
    Relu(Relu),
    Dense(Dense),
}

impl Layer {
    /// Instantiates a layer from its spec. Flops-only kinds (average
    /// pooling, dropout, inception) and the loss head are rejected.
    pub fn from_spec<R: Rng>(spec: &LayerSpec, input: Shape, init: Init, rng: &mut R) -> Result<Self> {
        match spec {
            LayerSpec::Conv(c) => Ok(Layer::Conv(Conv2d::new(c, input, init, rng)?)),
            LayerSpec::MaxPool { window, stride, pad } => {
                Ok(Layer::MaxPool(MaxPool2d::new(*window, *stride, *pad, input)?))
            }
            LayerSpec::Relu => Ok(Layer::Relu(Relu::default())),
            LayerSpec::Dense { inputs, outputs } => {
                spec.output_shape(input)?;
                Ok(Layer::Dense(Dense::new(*inputs, *outputs, init, rng)))
            }
            other => Err(NnError::Unsupported(other.kind_name())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Relu(_) => "relu",
            Layer::Dense(_) => "fc",
        }
    }

    /// Forward pass that keeps what backward needs.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => {
                let (out, cache) = l.run(x)?;
                l.cache = Some(cache);
                Ok(out)
            }
            Layer::MaxPool(l) => {
                let (out, arg) = l.run(x)?;
                l.cache = Some((x.batch(), arg));
                Ok(out)
            }
            Layer::Relu(l) => {
                let out = Relu::run(x);
                l.cache = Some(out.clone());
                Ok(out)
            }
            Layer::Dense(l) => {
                let out = l.run(x)?;
                let flat = x.clone().reshape(vec![x.batch(), l.inputs])?;
                l.cache = Some((x.shape().to_vec(), flat));
                Ok(out)
            }
        }
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.run(x).map(|(o, _)| o),
            Layer::MaxPool(l) => l.run(x).map(|(o, _)| o),
            Layer::Relu(_) => Ok(Relu::run(x)),
            Layer::Dense(l) => l.run(x),
        }
    }

    /// Backpropagates `grad_out` through the most recent [`Layer::forward`].
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Gradients> {
        self.backward_with(grad_out, true)
    }

    /// As [`Layer::backward`], optionally skipping the input gradient.
    pub fn backward_with(&mut self, grad_out: &Tensor, need_input: bool) -> Result<Gradients> {
        match self {
            Layer::Conv(l) => l.backward(grad_out, need_input),
            Layer::MaxPool(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::Dense(l) => l.backward(grad_out, need_input),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, Layer::Conv(c) if c.frozen)
    }
}

/// Mean softmax cross-entropy over a batch of logits.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCrossEntropy {
    cache: Option<(Tensor, Vec<usize>)>,
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.sample_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0;
        row.iter_mut().for_each(|v| {
            *v = (*v - max).exp();
            sum += *v;
        });
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

impl SoftmaxCrossEntropy {
    pub fn forward(&mut self, logits: &Tensor, labels: &[usize]) -> Result<f64> {
        let (loss, probs) = Self::evaluate(logits, labels)?;
        self.cache = Some((probs, labels.to_vec()));
        Ok(loss)
    }

    /// Loss and probabilities without caching.
    pub fn evaluate(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let n = logits.batch();
        let c = logits.sample_len();
        if logits.shape().len() != 2 || labels.len() != n {
            return Err(NnError::Shape(format!(
                "softmax-xent: logits {:?} vs {} labels",
                logits.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(NnError::Shape(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax(logits);
        let mut loss = 0.0;
        for (row, &label) in logits.data().chunks(c).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        Ok((loss / n.max(1) as f64, probs))
    }

    /// Gradient of the mean loss w.r.t. the logits.
    pub fn backward(&mut self) -> Result<Tensor> {
        let (mut probs, labels) = self.cache.take().ok_or(NnError::NoForwardCache("softmax-xent"))?;
        let n = labels.len().max(1) as f64;
        let c = probs.sample_len();
        for (row, &label) in probs.data_mut().chunks_mut(c).zip(&labels) {
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(probs)
    }
}
