use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration is internally inconsistent (bad dimensions, degenerate
    /// bounding box, invalid preset values).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called with arguments that violate its contract
    /// (shape mismatches, out-of-box points, mismatched grids).
    #[error("usage error: {0}")]
    Usage(String),

    /// A file could not be parsed. `offset` is the byte position where
    /// parsing failed, when known.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// A dataset element failed to load; `what` names the frame or file.
    #[error("failed to load {what}: {message}")]
    Load { what: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
