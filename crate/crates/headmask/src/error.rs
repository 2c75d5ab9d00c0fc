use thiserror::Error;

/// Error type shared across the library.
///
/// The CLI maps variants to exit codes: usage/shape/contract errors exit
/// with 2, data errors with 3, numeric failures (NaN) with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller misused an interface: bad argument, bad config value,
    /// violated precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Tensor shape mismatch; the message names both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed input data (corpus files, CSVs, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure, e.g. NaN loss during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
