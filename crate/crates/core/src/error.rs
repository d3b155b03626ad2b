use std::path::PathBuf;

use relchain_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("relation chain is empty")]
    EmptyChain,
    #[error("chain {0} has no single resolved relation")]
    Unresolved(String),
    #[error("story generation: {0}")]
    Story(String),
    #[error("unknown noise regime `{0}`")]
    UnknownNoise(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
