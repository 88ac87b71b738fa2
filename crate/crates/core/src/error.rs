use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("image {what}: {source}")]
    Image {
        what: String,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),

    /// One side of the protected/unprotected split is empty, so no bias is defined.
    #[error("subgroup {attribute}={value} is degenerate ({protected} protected, {unprotected} unprotected)")]
    SubgroupDegenerate {
        attribute: String,
        value: bool,
        protected: usize,
        unprotected: usize,
    },

    #[error("threshold calibration undefined: {0}")]
    CalibrationUndefined(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("AUC undefined: curve has {defined} defined points, need at least 2")]
    AucUndefined { defined: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("embeddings missing for {} ids: {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("provider failure: {msg}\n--- protocol transcript ---\n{}", .transcript.join("\n"))]
    Provider { msg: String, transcript: Vec<String> },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("pruning retained no records")]
    EmptyPruning,

    #[error("duplicate AUC cell ({row}, {col})")]
    DuplicateCell { row: String, col: String },

    #[error("nothing to render: {0}")]
    NothingToRender(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    /// True for the errors that turn a curve point into an undefined point
    /// instead of aborting the run.
    pub fn is_undefined_metric(&self) -> bool {
        matches!(
            self,
            Error::SubgroupDegenerate { .. }
                | Error::MetricUndefined(_)
                | Error::CalibrationUndefined(_)
        )
    }
}
