use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RelbiasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RelbiasError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite logit at sample_id {sample_id}")]
    NonFinite { sample_id: String },

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    Dimension {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("duplicate sample_id {0}")]
    DuplicateSample(String),

    #[error("sample_id {sample_id} present in {present} but missing from {missing}")]
    Orphan {
        sample_id: String,
        present: String,
        missing: String,
    },

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("invalid prior: {0}")]
    Prior(String),

    #[error("invalid sample {sample_id}: {message}")]
    Sample { sample_id: String, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing prediction for sample_id {0}")]
    MissingPrediction(String),
}

impl RelbiasError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
