//! Crate-wide error type.
//!
//! Variants are grouped by how the command-line tool reports them: usage
//! problems exit with code 1, bad or missing data with code 2, and numeric
//! failures (non-finite losses, divergent solves) with code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, flags, or network hyperparameters.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape or layout mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed or inconsistent file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Geometry that violates a precondition (open mesh, degenerate bounds).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Corpus generation or loading failure.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Non-finite values or a failed numeric solve.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Shape(_) | Error::Format(_) | Error::Geometry(_) | Error::Corpus(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 2,
        }
    }
}

/// Shorthand for `Error::Shape` with a formatted message.
#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(format!($($arg)*))
    };
}
