//! Error taxonomy shared across the crate.
//!
//! Errors are split into classes so the CLI can map them onto exit codes:
//! configuration and contract violations are validation failures, while
//! numeric blowups and I/O trouble mid-run are runtime failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A call-site precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file content (checkpoints, clouds, manifests, configs).
    #[error("format error: {0}")]
    Format(String),

    /// Strict parameter transfer found mismatches.
    #[error("transfer error: {0}")]
    Transfer(String),

    /// Non-finite values or a failed numeric threshold.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that indicate bad inputs rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dim(_)
                | Error::Config(_)
                | Error::Contract(_)
                | Error::Format(_)
                | Error::Transfer(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
