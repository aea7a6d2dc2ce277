//! Reverse-mode differentiation for small sequential networks.
//!
//! Each layer caches its input on the forward pass and maps the incoming
//! output gradient to parameter gradients and an input gradient on the way
//! back. [`gradcheck`] provides the finite-difference reference.

pub mod gradcheck;
mod layer;
mod loss;
mod model;
mod optim;
mod param;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use layer::{Conv2d, Dense, Layer};
pub use loss::Loss;
pub use model::{ForwardMode, LayerSpec, Model};
pub use optim::Sgd;
pub use param::{MaskedParameter, Parameter, QuantState};
