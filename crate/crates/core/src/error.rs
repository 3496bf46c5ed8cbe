use cdkd_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),

    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("coordinate {value} outside [0, {side})")]
    OutOfRange { value: f64, side: usize },

    #[error("no visible keypoints to evaluate")]
    NoVisibleKeypoints,

    #[error("distribution kind mismatch: expected {expected}")]
    Kind { expected: &'static str },

    #[error("{bins} bins not divisible by scale factor {m}")]
    Indivisible { bins: usize, m: usize },

    #[error("probability input contains a negative entry")]
    NegativeProbability,

    #[error("temperature {tau} outside [{min}, {max}]")]
    TauOutOfBounds { tau: f64, min: f64, max: f64 },

    #[error("learnable hyperparameter `{0}` is detached from the loss graph")]
    Detached(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("pose resampling exhausted after {0} attempts")]
    PoseExhausted(usize),

    #[error("malformed dataset file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
