use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes used by the command line front-end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Config,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("no role mapping for {0:?}")]
    UnmappedRole(String),
    #[error("{rejected} of {total} rows rejected (limit {limit_pct}%); first: {first}")]
    TooManyRejects {
        rejected: usize,
        total: usize,
        limit_pct: f64,
        first: String,
        report: Vec<crate::ingest::Reject>,
    },
    #[error("stratum {stratum} starved: need {needed}, have {available}")]
    StarvedStratum {
        stratum: String,
        needed: usize,
        available: usize,
    },
    #[error("feature manifest digest mismatch: checkpoint {expected}, data {found}")]
    FeatureDigestMismatch { expected: String, found: String },
    #[error("training aborted at epoch {epoch}: non-finite loss")]
    TrainingAborted {
        epoch: usize,
        /// Parameters as of the last epoch that finished with a finite loss.
        last_finite: Box<crate::model::ModelParams>,
        history: Vec<crate::train::EpochStats>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorClass::Config,
            Error::Numeric(_) | Error::TrainingAborted { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
