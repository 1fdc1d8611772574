//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. The variants map onto
//! the process exit codes used by the CLI: configuration and routing problems
//! are caller mistakes (exit 1), data problems come from input files or
//! corpora (exit 2), and the rest indicate bugs (exit 3).

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An index (token id, column, ...) out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Unknown or missing routing key (dialect, application).
    #[error("routing error: {0}")]
    Routing(String),

    /// Bad or missing input data (corpora, test sets, checkpoints on disk).
    #[error("data error: {0}")]
    Data(String),

    /// Reports cannot be compared (e.g. vocabulary fingerprints differ).
    #[error("comparison error: {0}")]
    Comparison(String),

    /// Malformed checkpoint or report file.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite value detected during validation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Invariant violation inside the library.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Routing(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Comparison(_) | Error::Format(_) => 2,
            Error::Dimension(_) | Error::Index(_) | Error::Numeric(_) | Error::Internal(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
