//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset construction, model configuration, and fitting.
#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem-level failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A malformed CSV or JSON input. `row` is 1-based and counts the header.
    #[error("parse error in {path} at row {row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },

    /// Structurally invalid data (duplicate keys, unknown ids, bad curve values).
    #[error("invalid data: {0}")]
    Data(String),

    /// An inconsistent or out-of-range model configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dimension mismatch between containers that must conform.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    /// A Cholesky factorization that failed even after the jitter ladder.
    #[error(
        "factorization of {context} failed after jitter up to {max_jitter:.3e} \
         (n = {n}, trace = {trace:.6e}, min diag = {min_diag:.6e})"
    )]
    Factorization {
        context: String,
        n: usize,
        trace: f64,
        min_diag: f64,
        max_jitter: f64,
    },

    /// A numeric invariant was violated (non-finite value where one is required).
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience constructor for [`Error::Io`].
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for [`Error::Parse`].
    pub fn parse(path: impl Into<String>, row: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            row,
            message: message.into(),
        }
    }

    /// Convenience constructor for [`Error::Dimension`].
    pub fn dim(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
