use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },

    #[error("invalid entity ({start}, {end}) in a sentence of {len} tokens")]
    EntityRange {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid tag sequence: {0}")]
    Tags(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version mismatch: {0}")]
    Version(String),

    #[error("incompatible model: {0}")]
    Incompatible(String),

    #[error("precomputed vectors: {0}")]
    Vectors(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
