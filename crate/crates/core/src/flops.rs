//! Floating-point operation counts per layer and per network.
//!
//! Counting convention:
//!
//! | layer        | FLOPs                                   |
//! |--------------|-----------------------------------------|
//! | conv         | `2·K²·Cin·Cout·Hout·Wout` (MAC = 2)     |
//! | fc           | `2·in·out`                              |
//! | max/avg pool | one per output element                  |
//! | relu         | one per output element                  |
//! | softmax-xent | 5 per class                             |
//! | dropout      | 0                                       |
//! | inception    | sum of its branch convs, relus and pool |
//!
//! Biases are not counted. All counts are per sample.

use crate::nn::{InceptionSpec, LayerSpec, NetworkSpec, NnError, Shape};

pub type Result<T> = std::result::Result<T, NnError>;

pub const CONVENTION: &str =
    "multiply-accumulate = 2 FLOPs; pool/relu = 1 per output; softmax = 5 per class; biases not counted";

pub const SOFTMAX_FLOPS_PER_CLASS: u64 = 5;

fn conv(k: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    2 * (k * k * cin * cout * h * w) as u64
}

fn inception_flops(b: &InceptionSpec, input: Shape) -> u64 {
    let (cin, hw) = (b.in_channels, input.h * input.w);
    let relu = |c: usize| (c * hw) as u64;
    conv(1, cin, b.b1x1, input.h, input.w)
        + relu(b.b1x1)
        + conv(1, cin, b.b3x3_reduce, input.h, input.w)
        + relu(b.b3x3_reduce)
        + conv(3, b.b3x3_reduce, b.b3x3, input.h, input.w)
        + relu(b.b3x3)
        + conv(1, cin, b.b5x5_reduce, input.h, input.w)
        + relu(b.b5x5_reduce)
        + conv(5, b.b5x5_reduce, b.b5x5, input.h, input.w)
        + relu(b.b5x5)
        // 3x3 stride-1 max pool keeps the spatial size
        + (cin * hw) as u64
        + conv(1, cin, b.pool_proj, input.h, input.w)
        + relu(b.pool_proj)
}

/// FLOPs of one layer applied to `input`.
pub fn layer_flops(layer: &LayerSpec, input: Shape) -> Result<u64> {
    let out = layer.output_shape(input)?;
    Ok(match layer {
        LayerSpec::Conv(c) => conv(c.kernel, c.in_channels, c.out_channels, out.h, out.w),
        LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } | LayerSpec::Relu => out.len() as u64,
        LayerSpec::Dense { inputs, outputs } => 2 * (inputs * outputs) as u64,
        LayerSpec::SoftmaxXent { classes } => SOFTMAX_FLOPS_PER_CLASS * *classes as u64,
        LayerSpec::Dropout { .. } => 0,
        LayerSpec::Inception(b) => inception_flops(b, input),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFlops {
    pub name: String,
    pub output: Shape,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub network: String,
    pub input: Shape,
    pub layers: Vec<LayerFlops>,
    pub total: u64,
    /// First layer's share of the total: the arithmetic an optical first
    /// layer removes.
    pub first_layer_fraction: f64,
}

pub fn network_flops(net: &NetworkSpec) -> Result<FlopsReport> {
    let shapes = net.shapes()?;
    let mut input = net.input;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, (l, out)) in net.layers.iter().zip(&shapes).enumerate() {
        layers.push(LayerFlops {
            name: format!("{}{}", l.kind_name(), i + 1),
            output: *out,
            flops: layer_flops(l, input)?,
        });
        input = *out;
    }
    let total: u64 = layers.iter().map(|l| l.flops).sum();
    if total == 0 {
        return Err(NnError::Spec(format!("{} performs no arithmetic", net.name)));
    }
    let first_layer_fraction = layers[0].flops as f64 / total as f64;
    Ok(FlopsReport { network: net.name.clone(), input: net.input, layers, total, first_layer_fraction })
}

impl FlopsReport {
    pub fn first_layer_flops(&self) -> u64 {
        self.layers[0].flops
    }

    pub fn savings_note(&self) -> String {
        format!(
            "optical first layer saves {} of {} FLOPs ({:.2}%)",
            self.first_layer_flops(),
            self.total,
            100.0 * self.first_layer_fraction
        )
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{} on {}\n", self.network, self.input);
        s.push_str(&format!("{:<width$}  {:>14}  {:>16}  {:>8}\n", "layer", "output", "flops", "share"));
        for l in &self.layers {
            s.push_str(&format!(
                "{:<width$}  {:>14}  {:>16}  {:>7.3}%\n",
                l.name,
                l.output.to_string(),
                l.flops,
                100.0 * l.flops as f64 / self.total as f64
            ));
        }
        s.push_str(&format!("{:<width$}  {:>14}  {:>16}\n", "total", "", self.total));
        s.push_str(&format!("{}\nconvention: {CONVENTION}\n", self.savings_note()));
        s
    }

    pub const CSV_HEADER: &'static str = "network,layer,output,flops";

    /// CSV rows, one per layer plus a `total` row.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> =
            self.layers.iter().map(|l| format!("{},{},{},{}", self.network, l.name, l.output, l.flops)).collect();
        rows.push(format!("{},total,,{}", self.network, self.total));
        rows
    }
}

const GOOGLENET: &str = include_str!("../specs/googlenet.json");
const NIN: &str = include_str!("../specs/nin.json");
const VGG_M_128: &str = include_str!("../specs/vgg-m-128.json");

/// Names accepted by [`zoo`].
pub const ZOO: [&str; 4] = ["lenet", "googlenet", "nin", "vgg-m-128"];

/// Built-in architectures. `lenet` is the 12-filter trainable LeNet on
/// 28×28 inputs; the others are grayscale versions of the published nets.
pub fn zoo(name: &str) -> Result<NetworkSpec> {
    match name {
        "lenet" => crate::nn::build_lenet(crate::nn::FirstLayer::Trainable(12), Shape::new(1, 28, 28), 10),
        "googlenet" => NetworkSpec::from_json(GOOGLENET),
        "nin" => NetworkSpec::from_json(NIN),
        "vgg-m-128" => NetworkSpec::from_json(VGG_M_128),
        other => Err(NnError::Spec(format!("unknown network `{other}`; known: {}", ZOO.join(", ")))),
    }
}
