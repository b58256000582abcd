use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed data whose shape or content does not satisfy the contract.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A batch does not satisfy the triplet-mining preconditions.
    #[error("rejected batch: {0}")]
    RejectedBatch(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Model state is internally inconsistent (bad running statistics, missing tensors).
    #[error("internal state error: {0}")]
    State(String),

    /// A loss or gradient became non-finite during training.
    #[error("training diverged at {stage} epoch {epoch} iteration {iteration}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn rejected(msg: impl Into<String>) -> Error {
    Error::RejectedInput(msg.into())
}
