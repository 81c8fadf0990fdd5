use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that should compose do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    Numeric(String),

    /// An operation was called out of order, e.g. backward with a stale trace.
    #[error("invalid state: {0}")]
    State(String),

    #[error("bad argument: {0}")]
    Argument(String),

    /// Malformed file contents (wrong magic number, bad header, ...).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Two inputs that must agree do not (e.g. image and label counts).
    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Training diverged.
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
