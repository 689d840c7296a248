//! Channel saliency from batch-norm parameters, validated against oracle
//! pruning, on a small self-contained Conv-BN-ReLU engine.
//!
//! The engine is generic over the scalar type (`f32` for training, `f64`
//! for verification); the aliases below name the concrete forms.

pub mod autograd;
pub mod data;
pub mod error;
pub mod netgraph;
pub mod numfmt;
pub mod optim;
pub mod oracle;
pub mod saliency;
pub mod scalar;
pub mod surgeon;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autograd::Tape<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type Network32 = netgraph::Network<f32>;
pub type Network64 = netgraph::Network<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
