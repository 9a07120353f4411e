//! Data pipeline, training loop and experiment tooling for jointly
//! trained vision transformers and convolutional agents.

pub mod ablate;
pub mod augment;
pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod inspect;
pub mod metrics;
pub mod sweep;
pub mod train;
pub mod verify;

pub use error::{HarnessError, Result};
