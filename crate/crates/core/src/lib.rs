//! Taylor-score pruning and incremental power-of-two quantization for small
//! neural networks, with shift-based inference, cost accounting, and a
//! compact sparse model format.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod costmodel;
pub mod data;
mod error;
pub mod exec;
pub mod inference;
pub mod metrics;
pub mod model_io;
pub mod pruning;
pub mod quantization;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
