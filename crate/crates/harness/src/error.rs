use std::path::PathBuf;

use bootvit_core::CoreError;
use bootvit_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite loss at epoch {epoch} step {step}; breakdown written to {}", .dump.display())]
    NonFinite { epoch: usize, step: usize, dump: PathBuf },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}
