use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("score vector has no finite entry")]
    EmptySupport,

    #[error("no valid positions in batch")]
    EmptyBatch,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("corpus too small: {len} tokens, need at least {needed}")]
    CorpusTooSmall { len: usize, needed: usize },

    #[error("tokenization failed at byte offset {offset}: no vocabulary symbol matches")]
    Tokenize { offset: usize },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training diverged at step {step} (last good checkpoint: {last_good})")]
    Diverged { step: usize, last_good: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
