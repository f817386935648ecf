use std::path::PathBuf;

use thiserror::Error;
use twostream_autograd::GraphError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("internal wiring error: {0}")]
    Internal(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("incompatible container version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("mask generation failed: {0}")]
    Generation(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("training aborted: {0}")]
    Training(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
