//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Validation` covers contract violations (bad shapes, out-of-range
/// parameters, non-finite inputs); `Io` and `Format` cover everything that
/// touches the filesystem. The CLI maps `Validation` to exit code 1 and the
/// I/O family to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk data; `offset` is the byte position where parsing
    /// failed, when known.
    #[error("format error at byte {offset}: {message}")]
    Format { message: String, offset: u64 },

    #[error("training aborted at epoch {epoch}: {message}")]
    TrainingAborted { epoch: usize, message: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>, offset: u64) -> Self {
        Error::Format { message: msg.into(), offset }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::TrainingAborted { .. } => 1,
            Error::Io(_) | Error::Format { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
