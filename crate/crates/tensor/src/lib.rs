//! Dense row-major tensors and a tape-based reverse-mode differentiation
//! engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! append order. [`Graph::backward`] walks that record in reverse exactly
//! once and returns a [`Gradients`] table holding `dLoss/dNode` for every
//! node that requires a gradient. Leaves created with [`Graph::constant`]
//! or produced by [`Graph::detach`] never receive a gradient.
//!
//! Parameters live outside the graph; callers copy them in as leaves for
//! each step and read the leaf gradients back out afterwards.

mod error;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub mod conv;
pub mod gradcheck;
pub mod kernels;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Per-output-row source index used by [`Graph::head_gather`]; `None`
/// selects zero padding.
pub type IndexMap = Vec<Option<usize>>;
