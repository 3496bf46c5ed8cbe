use cdkd_autograd::AutogradError;
use cdkd_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed metrics file: {0}")]
    Metrics(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Checkpoint(_) => 4,
            HarnessError::Core(CoreError::Config(_)) => 2,
            HarnessError::Core(CoreError::NonFinite(_)) => 3,
            HarnessError::Core(CoreError::Autograd(AutogradError::NonFinite { .. })) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl From<AutogradError> for HarnessError {
    fn from(e: AutogradError) -> Self {
        HarnessError::Core(CoreError::Autograd(e))
    }
}
