use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HebbError>;

#[derive(Debug, Error)]
pub enum HebbError {
    /// Operand shapes do not line up.
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: String, detail: String },

    /// A setting or argument is outside its allowed range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Kernel/stride geometry does not fit the input.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Malformed binary container (IDX or checkpoint).
    #[error("format error in {path} at byte offset {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Two inputs that should agree do not (e.g. image and label counts).
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HebbError {
    pub(crate) fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        HebbError::Dimension {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HebbError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HebbError::Config(_)
                | HebbError::Geometry(_)
                | HebbError::Dimension { .. }
                | HebbError::Format { .. }
                | HebbError::Consistency(_)
                | HebbError::Checkpoint(_)
                | HebbError::Unsupported(_)
        )
    }
}
