//! Dense `f64` tensors and a tape-based reverse-mode gradient graph.
//!
//! Everything trainable in the crate (the sparse autoencoder, the soft-prompt
//! projectors, the toy transformer during pretraining) is expressed as a
//! sequence of [`Graph`] operations on [`Var`] handles.

mod graph;
pub mod init;
pub mod optim;
pub mod kernels;
mod tensor;

pub use graph::{gelu_scalar, sigmoid_scalar, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
