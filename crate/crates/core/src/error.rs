use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An inner iteration failed to converge or produced a non-finite value.
    /// `trace` holds the residual (or state) history up to the failure.
    #[error("numerical failure: {message}")]
    NumericalFailure { message: String, trace: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, trace: Vec<f64>) -> Self {
        Error::NumericalFailure {
            message: msg.into(),
            trace,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
