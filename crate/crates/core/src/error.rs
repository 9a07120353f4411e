use bootvit_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}
