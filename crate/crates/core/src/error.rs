use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DsrError>;

#[derive(Debug, Error)]
pub enum DsrError {
    /// A caller broke an operation's precondition (shapes, dimensions, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset has {} problem(s):\n  {}", .0.len(), .0.join("\n  "))]
    Dataset(Vec<String>),

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training stage order: {0}")]
    StageOrder(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training corpus is empty")]
    EmptyCorpus,
}

impl DsrError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
