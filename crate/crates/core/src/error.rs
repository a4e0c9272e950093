use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty training text")]
    EmptyTrainingText,

    #[error("character {0:?} is not in the tokenizer alphabet")]
    OutOfAlphabet(char),

    #[error("empty word")]
    EmptyWord,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("invalid merge table: {0}")]
    InvalidMergeTable(String),

    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },

    #[error("empty annotation set for context {0:?}")]
    EmptyAnnotations(String),

    #[error("cannot split annotation multiset with M = {0} < 2")]
    CannotSplit(usize),

    #[error("split needs at least 3 passages, found {0}")]
    TooFewPassages(usize),

    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("diverged")]
    Diverged,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergedAt { epoch: usize, batch: usize },

    #[error("zero-probability target {0:?}")]
    ZeroProbabilityTarget(String),

    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, tokenizer {tokenizer}")]
    VocabMismatch { checkpoint: String, tokenizer: String },

    #[error("context sets differ: {0}")]
    MismatchedContexts(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
