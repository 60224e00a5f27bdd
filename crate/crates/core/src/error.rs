//! Error type shared across the crate.
//!
//! Variants map onto the failure classes surfaced by the CLI: configuration
//! problems, contract violations (misuse of an API), corrupt checkpoints,
//! and training divergence.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up. Always names the
    /// operation and both offending shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value or file.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Task schedule is malformed (overlapping or oversized class sets).
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Checkpoint or stats file is missing, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training failed to reach its gate within the epoch budget.
    #[error("training divergence: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
