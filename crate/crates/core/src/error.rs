use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed matrix header: {0}")]
    Header(String),

    #[error("truncated matrix payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid code matrix: {0}")]
    Codes(String),

    #[error("zero-norm column after centering at item {item}")]
    ZeroNormColumn { item: usize },

    #[error("zero-norm query after centering")]
    ZeroNormQuery,

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("non-finite intermediate value in {0}")]
    NonFiniteIterate(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("labels are required for {0}")]
    MissingLabels(&'static str),

    #[error("query modality {query} cannot search a database of modality {database}")]
    ModalityMismatch {
        query: crate::Modality,
        database: crate::Modality,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("training failed in round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
