use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid shape {shape:?}: every axis must be positive and the element count must equal {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient produced by op `{op}`")]
    NonFiniteGradient { op: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("serialization: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<S: Into<String>>(op: &'static str, detail: S) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

pub(crate) fn arg_err<S: Into<String>>(op: &'static str, detail: S) -> TensorError {
    TensorError::InvalidArgument { op, detail: detail.into() }
}
