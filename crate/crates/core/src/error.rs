use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("entity surface {0:?} normalizes to an empty key")]
    NormalizesToEmpty(String),
    #[error("invalid chunk config: max_chunk_tokens ({max_chunk_tokens}) must exceed overlap_tokens ({overlap_tokens})")]
    InvalidChunkConfig {
        max_chunk_tokens: usize,
        overlap_tokens: usize,
    },
}

#[derive(Debug, Error)]
pub enum GazetteerError {
    #[error("gazetteer line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reading gazetteer: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("corpus has {found} records, at least {needed} are needed to split")]
    TooSmall { found: usize, needed: usize },
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

impl CorpusError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value at update {update}: {what}")]
    NumericalDivergence {
        update: u64,
        what: String,
        /// Policy as it was when the divergence was detected.
        state: Box<crate::trainer::PolicyState>,
    },
}
