//! Architecture descriptions shared by the trainer and the FLOPS meter.

use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::optics::FilterBank;

/// Per-sample activation shape: channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

fn default_stride() -> usize {
    1
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub pad: usize,
    /// Fixed `[out, in, k, k]` weights; their presence freezes the layer
    /// (bias fixed at zero).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_weights: Option<Vec<f64>>,
}

impl ConvSpec {
    pub fn trainable(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, pad: 0, frozen_weights: None }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_weights.is_some()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// GoogLeNet-style block: four parallel branches concatenated on channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub in_channels: usize,
    pub b1x1: usize,
    pub b3x3_reduce: usize,
    pub b3x3: usize,
    pub b5x5_reduce: usize,
    pub b5x5: usize,
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub fn out_channels(&self) -> usize {
        self.b1x1 + self.b3x3 + self.b5x5 + self.pool_proj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    #[serde(rename = "maxpool")]
    MaxPool {
        window: usize,
        stride: usize,
        #[serde(default, skip_serializing_if = "is_zero")]
        pad: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        window: usize,
        stride: usize,
        #[serde(default, skip_serializing_if = "is_zero")]
        pad: usize,
    },
    Relu,
    #[serde(rename = "fc")]
    Dense {
        inputs: usize,
        outputs: usize,
    },
    SoftmaxXent {
        classes: usize,
    },
    /// Identity at inference; carries no arithmetic.
    Dropout {
        rate: f64,
    },
    Inception(InceptionSpec),
}

fn pooled(len: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || window == 0 || len + 2 * pad < window {
        return None;
    }
    Some((len + 2 * pad - window) / stride + 1)
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "fc",
            LayerSpec::SoftmaxXent { .. } => "softmax-xent",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Inception(_) => "inception",
        }
    }

    /// Output shape for one sample, or a shape error.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let err = |msg: String| NnError::Shape(format!("{}: {msg}", self.kind_name()));
        match self {
            LayerSpec::Conv(c) => {
                if c.in_channels != input.c {
                    return Err(err(format!("expects {} channels, input {input}", c.in_channels)));
                }
                if let Some(w) = &c.frozen_weights {
                    if w.len() != c.weight_len() {
                        return Err(err(format!("{} frozen weights, expected {}", w.len(), c.weight_len())));
                    }
                }
                let h = pooled(input.h, c.kernel, c.stride, c.pad);
                let w = pooled(input.w, c.kernel, c.stride, c.pad);
                match (h, w) {
                    (Some(h), Some(w)) if c.out_channels > 0 => Ok(Shape::new(c.out_channels, h, w)),
                    _ => Err(err(format!("{0}x{0} kernel does not fit input {input}", c.kernel))),
                }
            }
            LayerSpec::MaxPool { window, stride, pad } | LayerSpec::AvgPool { window, stride, pad } => {
                if *pad >= *window {
                    return Err(err(format!("pad {pad} must be smaller than window {window}")));
                }
                match (pooled(input.h, *window, *stride, *pad), pooled(input.w, *window, *stride, *pad)) {
                    (Some(h), Some(w)) => Ok(Shape::new(input.c, h, w)),
                    _ => Err(err(format!("window {window} does not fit input {input}"))),
                }
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input),
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs != input.len() {
                    return Err(err(format!("expects {inputs} inputs, input {input} has {}", input.len())));
                }
                Ok(Shape::flat(*outputs))
            }
            LayerSpec::SoftmaxXent { classes } => {
                if input.len() != *classes || *classes < 2 {
                    return Err(err(format!("expects {classes} logits, input {input}")));
                }
                Ok(input)
            }
            LayerSpec::Inception(b) => {
                if b.in_channels != input.c {
                    return Err(err(format!("expects {} channels, input {input}", b.in_channels)));
                }
                if input.h < 1 || input.w < 1 {
                    return Err(err("empty input".into()));
                }
                Ok(Shape::new(b.out_channels(), input.h, input.w))
            }
        }
    }
}

/// An ordered architecture with its input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Shape after every layer, in order.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                shape = l.output_shape(shape).map_err(|e| NnError::Shape(format!("layer {i}: {e}")))?;
                Ok(shape)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| NnError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Same architecture with a different input resolution. Dense layers
    /// directly after the spatial part are resized to the new flattened
    /// length.
    pub fn with_input(&self, input: Shape) -> Result<Self> {
        let mut spec = self.clone();
        spec.input = input;
        let mut shape = input;
        for layer in &mut spec.layers {
            if let LayerSpec::Dense { inputs, .. } = layer {
                *inputs = shape.len();
            }
            shape = layer.output_shape(shape)?;
        }
        Ok(spec)
    }
}

/// First layer of a LeNet: learned filters or a frozen optical bank.
#[derive(Debug, Clone, Copy)]
pub enum FirstLayer<'a> {
    Trainable(usize),
    Frozen(&'a FilterBank),
}

/// Classic LeNet body:
/// `conv(k, D) – maxpool 2 – conv(5, 50) – maxpool 2 – fc 500 – relu – fc n – softmax`.
///
/// The first convolution is 5×5 with `D` learned filters, or uses the bank's
/// kernel size with each kernel replicated across input channels.
pub fn build_lenet(first: FirstLayer<'_>, input: Shape, n_classes: usize) -> Result<NetworkSpec> {
    if n_classes < 2 {
        return Err(NnError::Spec(format!("need at least 2 classes, got {n_classes}")));
    }
    let (conv1, name) = match first {
        FirstLayer::Trainable(n) => {
            if n == 0 {
                return Err(NnError::Spec("first layer needs at least one filter".into()));
            }
            (ConvSpec::trainable(input.c, n, 5), format!("lenet{n}"))
        }
        FirstLayer::Frozen(bank) => {
            if bank.is_empty() {
                return Err(NnError::Spec("frozen first layer needs a non-empty bank".into()));
            }
            let k = bank.kernel_size();
            if bank.kernels.iter().any(|kern| kern.size != k || kern.values.len() != k * k) {
                return Err(NnError::Spec("bank kernels must be square and equally sized".into()));
            }
            let mut weights = Vec::with_capacity(bank.len() * input.c * k * k);
            for kernel in &bank.kernels {
                for _ in 0..input.c {
                    weights.extend_from_slice(&kernel.values);
                }
            }
            let spec = ConvSpec {
                in_channels: input.c,
                out_channels: bank.len(),
                kernel: k,
                stride: 1,
                pad: 0,
                frozen_weights: Some(weights),
            };
            (spec, format!("lenet-asp{}", bank.len()))
        }
    };
    let d = conv1.out_channels;
    let mut layers = vec![
        LayerSpec::Conv(conv1),
        LayerSpec::MaxPool { window: 2, stride: 2, pad: 0 },
        LayerSpec::Conv(ConvSpec::trainable(d, 50, 5)),
        LayerSpec::MaxPool { window: 2, stride: 2, pad: 0 },
    ];
    let mut shape = input;
    for l in &layers {
        shape = l
            .output_shape(shape)
            .map_err(|e| NnError::Spec(format!("LeNet body does not fit a {input} input: {e}")))?;
    }
    layers.extend([
        LayerSpec::Dense { inputs: shape.len(), outputs: 500 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 500, outputs: n_classes },
        LayerSpec::SoftmaxXent { classes: n_classes },
    ]);
    let spec = NetworkSpec { name, input, layers };
    spec.validate()?;
    Ok(spec)
}
