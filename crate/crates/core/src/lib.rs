//! Chained transformers trained by residual boosting, with layer-wise hidden
//! state fusion, pipelined decoding and the probes used to check the theory.

pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod numkit;
pub mod pipeline;
pub mod scalar;
pub mod schedlab;
pub mod tasks;
pub mod theory;
pub mod training;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor64 = numkit::Tensor<f64>;
pub type Tensor32 = numkit::Tensor<f32>;
pub type Model64 = transformer::Transformer<f64>;
pub type Model32 = transformer::Transformer<f32>;
