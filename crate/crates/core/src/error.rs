use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid hyperparameters, unknown tap ids, inconsistent layer pairs.
    #[error("configuration error: {0}")]
    Config(String),

    /// NaN or infinity where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed dataset files or labels.
    #[error("data format error: {0}")]
    Format(String),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
