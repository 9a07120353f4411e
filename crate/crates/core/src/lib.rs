//! Models and training rules for bootstrapping a vision Transformer with
//! an architecture-matched agent CNN.
//!
//! - [`inductive_bias`]: convolution as a sum of token gathers, the
//!   generalized head convolution and attention.
//! - [`arch`]: ViT and agent construction over a [`params::ParamStore`].
//! - [`objectives`]: feature supervision, mutual distillation and the
//!   combined objective.
//! - [`optim`] and [`bootstrap`]: AdamW, cosine schedule, gradient
//!   alignment and the shared-weight update.

pub mod arch;
pub mod bootstrap;
pub mod checkpoint;
pub mod error;
pub mod inductive_bias;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::{CoreError, Result};
