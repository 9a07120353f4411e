use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: non-finite value encountered")]
    Numeric { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

pub(crate) fn dim_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        msg: msg.into(),
    })
}
