use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("invalid entity span: {0}")]
    InvalidSpan(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible adapters: {0}")]
    Incompatible(String),

    #[error("input of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("no uid occurs at least twice; contrastive batches need positives")]
    NoPositives,

    #[error("every instance in the batch was skipped (no positives)")]
    EmptyBatch,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing adapter: {0}")]
    MissingAdapter(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
