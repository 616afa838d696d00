use thiserror::Error;

/// Unified error type for corpus loading, artifact serialization, and the
/// numeric kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input data; `line` is 1-based within the named file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Structurally valid input that violates a documented constraint.
    #[error("{0}")]
    Invalid(String),

    /// Corrupt or foreign binary artifact (magic, truncation, trailing bytes).
    #[error("{0}")]
    Format(String),

    #[error("unsupported container version {found}; this build reads version {supported}")]
    Version { found: u32, supported: u32 },

    /// Numerical failure: non-finite values, degenerate norms, NaN loss.
    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
