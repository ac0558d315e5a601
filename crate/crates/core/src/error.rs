//! Crate-wide error type.
//!
//! Variants map onto the CLI's exit-code contract: `Usage` problems exit 1,
//! data/config/IO problems exit 2, and numeric failures (non-finite values,
//! degenerate norms) exit 3.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes fed to an operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Malformed or inconsistent input data (corpora, vocab files, checkpoints).
    #[error("data error: {0}")]
    Data(String),
    /// Invalid or contradictory configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Numeric failure: NaN/Inf produced, zero norms, non-finite loss.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the CLI: 2 for data-ish problems, 3 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Shape(_) | Error::Data(_) | Error::Config(_) | Error::Io(_) => 2,
        }
    }
}
