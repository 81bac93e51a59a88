use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A line of an input file could not be parsed or failed validation.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {query_id}: {message}")]
    InvalidRecord { query_id: String, message: String },

    #[error("candidate {index}: {source}")]
    Candidate {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Violated precondition on an argument (shape, range, finiteness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The data admits no meaningful fit (single class, all-zero flow, ...).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// Model and data disagree (feature names, model kind).
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    /// Innermost error, looking through candidate wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Candidate { source, .. } => source.root(),
            other => other,
        }
    }
}
