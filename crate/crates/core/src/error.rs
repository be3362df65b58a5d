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

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    /// A caller broke an operation's precondition (shape, length, range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset at {0} contains no images")]
    EmptyDataset(PathBuf),

    #[error("weighted variance of the target is zero; r2 is undefined")]
    UndefinedR2,

    #[error("invalid model spec: {0}")]
    Spec(String),

    /// The external model could not be reached or did not answer in time.
    #[error("model transport error: {0}")]
    Transport(String),

    #[error("model protocol error: {message} (line: {line})")]
    Protocol { message: String, line: String },

    #[error("invalid probability vector: {0}")]
    Validation(String),

    #[error("model failed on sample {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True when the failure came from reaching the model rather than from the input.
    pub fn is_transport(&self) -> bool {
        match self {
            Error::Transport(_) => true,
            Error::Batch { source, .. } => source.is_transport(),
            _ => false,
        }
    }
}
