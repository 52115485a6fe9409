use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpaceError>;

#[derive(Debug, Error)]
pub enum SpaceError {
    /// Bad user input: missing directories, unknown config keys, shape/config mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// A single dataset item could not be read or decoded.
    #[error("cannot read item {path}: {reason}")]
    Item { path: PathBuf, reason: String },

    /// A caller violated an operation's precondition (shape mismatch, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at iteration {iteration}: {snapshot}")]
    NonFinite { iteration: u64, snapshot: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl SpaceError {
    pub fn config(msg: impl Into<String>) -> Self {
        SpaceError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        SpaceError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpaceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user configuration rather than a runtime fault.
    pub fn is_config(&self) -> bool {
        matches!(self, SpaceError::Config(_) | SpaceError::Format { .. })
    }
}
