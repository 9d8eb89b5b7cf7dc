//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit-code contract: configuration,
/// validation, planning and format errors are usage errors (exit 2),
/// everything else is an internal failure (exit 1).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid static configuration (dimensions, schedule ranges, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (shape mismatch, index out of range, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Inference plan or window tiling incompatible with the request.
    #[error("planning error: {0}")]
    Planning(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Broken internal invariant; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),

    /// Malformed file contents (checkpoints, clips, configs).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code for this error: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Planning(_) | Error::Format(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
