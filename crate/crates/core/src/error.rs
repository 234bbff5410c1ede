use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = UfpsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UfpsError {
    /// A forward or backward pass produced NaN or infinity.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("uncertainty bank is empty")]
    EmptyBank,

    #[error("gradient has zero norm")]
    ZeroGradient,

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<UfpsError>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl UfpsError {
    pub fn for_client(self, client: usize) -> Self {
        UfpsError::Client {
            client,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_config(&self) -> bool {
        match self {
            UfpsError::Config(_) => true,
            UfpsError::Client { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UfpsError::Io {
            path: path.into(),
            source,
        }
    }
}
