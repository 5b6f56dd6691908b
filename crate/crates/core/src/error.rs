use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("dataset validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of vocabulary range {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("backward pass requires a training-mode forward trace")]
    MissingTrace,

    #[error("format error: {0}")]
    Format(String),

    #[error("fingerprint mismatch: index built with `{index}`, embedder is `{embedder}`")]
    FingerprintMismatch { index: String, embedder: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("embedding backend failed after {completed} items: {message}")]
    Backend { completed: usize, message: String },

    #[error("remote request failed after {attempts} attempts: {message}")]
    Remote { attempts: usize, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
