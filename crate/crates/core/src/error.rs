use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("schema error in {path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing embedding for label {0:?}")]
    MissingEmbedding(String),

    #[error("missing description for track {track} at view {view}")]
    MissingDescription { track: u64, view: usize },

    #[error("detection {index} has no track id")]
    MissingTrackId { index: usize },

    #[error("track {track} has more than one detection in view {view}")]
    DuplicateTrackView { track: u64, view: usize },

    #[error("no Gaussian selected by the mask")]
    EmptySelection,

    #[error("positive set is empty")]
    EmptyPositives,

    #[error("positive {0} is not a member of the contrastive pool")]
    PositiveNotInPool(usize),

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code used by the command line tool: 2 for data and schema
    /// problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
