use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PegoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PegoError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("gradient requested for frozen or unknown parameter `{0}`")]
    FrozenParam(String),

    #[error("inconclusive gradient check: {accepted} of {requested} probes accepted")]
    InconclusiveCheck { accepted: usize, requested: usize },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PegoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PegoError::Io {
            path: path.into(),
            source,
        }
    }
}
