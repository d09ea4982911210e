//! Symmetric and pairwise dot-product self-attention in a small BERT-style
//! masked language model, built on a minimal `f64` autodiff engine.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
mod kernels;
pub mod manifest;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use attention::{attention_param_count, OperatorKind};
pub use error::{Error, Result};
pub use kernels::gelu;
pub use model::{build_model, count_params, EncoderModel, ModelConfig};
pub use tensor::Tensor;
