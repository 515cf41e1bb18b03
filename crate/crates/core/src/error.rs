use thiserror::Error;

pub type Result<T> = std::result::Result<T, SclvmError>;

#[derive(Debug, Error)]
pub enum SclvmError {
    /// A caller broke a documented precondition (bad dimensions, nonpositive
    /// variance, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("initialization failed: {0}")]
    Init(String),

    /// Factorization failed even at the largest jitter, or a non-finite value
    /// appeared in the bound.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("category label {0} is unknown to the model")]
    UnknownLabel(u32),

    #[error("test-point inference failed: {message}")]
    Inference {
        message: String,
        /// Best bound increase reached before the failure, when any.
        best_delta: Option<f64>,
    },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SclvmError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SclvmError::Contract(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        SclvmError::Numerical(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        SclvmError::Data(msg.into())
    }
}
