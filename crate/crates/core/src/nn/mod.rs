//! A small CPU convolutional network: tensors, layers with backward passes,
//! SGD training and finite-difference gradient checks.

pub mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod spec;
pub mod tensor;
pub mod train;

pub use gradcheck::{check_layer, check_network, check_softmax_xent, GradCheckReport};
pub use layers::{softmax, Conv2d, Dense, Gradients, Init, Layer, MaxPool2d, Relu, SoftmaxCrossEntropy};
pub use network::{argmax_rows, BatchGradients, Network};
pub use spec::{build_lenet, ConvSpec, FirstLayer, InceptionSpec, LayerSpec, NetworkSpec, Shape};
pub use tensor::Tensor;
pub use train::{evaluate, history_csv, predict, train, train_network, EpochStats, Samples, Sgd, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network: {0}")]
    Spec(String),
    #[error("layer kind `{0}` cannot be executed")]
    Unsupported(&'static str),
    #[error("{0}: backward called before forward")]
    NoForwardCache(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
