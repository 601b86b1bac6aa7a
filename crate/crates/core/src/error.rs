use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("token id {id} is outside the vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),

    #[error("word {0:?} is not in the vocabulary and no unknown token is configured")]
    UnknownWord(String),

    #[error("invalid model configuration: {0}")]
    ModelConfig(String),

    #[error("invalid training configuration: {0}")]
    TrainConfig(String),

    #[error("{}:{line}: {msg}", path.display())]
    ConfigParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("sequence of {len} tokens is too short for context length {context}")]
    TooShort { len: usize, context: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
