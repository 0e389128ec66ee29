use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time t={0} outside the open interval (0,1)")]
    TimeOutOfRange(f64),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid condition index {index} for {num_classes} classes")]
    InvalidCondition { index: usize, num_classes: usize },

    #[error("denoiser does not support the null condition")]
    NullConditionUnsupported,

    #[error("noise level set requires N >= 1, got {0}")]
    EmptyNoiseSet(usize),

    #[error("non-finite value at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
