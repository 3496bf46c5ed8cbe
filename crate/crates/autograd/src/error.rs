use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backprop requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed for node {0}")]
    TapeConsumed(usize),

    #[error("gradient reversal scale must be nonnegative, got {0}")]
    NegativeScale(f64),

    #[error("tensors belong to different tapes")]
    ForeignTape,

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutogradError::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn arg_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutogradError::InvalidArgument {
        op,
        detail: detail.into(),
    })
}
