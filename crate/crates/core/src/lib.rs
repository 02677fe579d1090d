//! Vision-transformer supernet that classifies under several patch
//! granularities and token keep rates, with analytic cost accounting and an
//! early-exit inference scheduler.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod numerics;
pub mod profiler;
pub mod run_config;
pub mod scheduler;
pub mod training;

use std::path::PathBuf;

use thiserror::Error;

pub use numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("subnet {subnet} has no unpruned teacher {teacher} in the prediction set")]
    MissingTeacher { subnet: String, teacher: String },
    #[error("non-finite loss in subnet {subnet}")]
    NonFiniteLoss { subnet: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("malformed {what} at byte {offset}: {message}")]
    Format {
        what: &'static str,
        offset: u64,
        message: String,
    },
    #[error("checkpoint tensor {name}: {message}")]
    Checkpoint { name: String, message: String },
    #[error("no subnet fits within a budget of {budget} MACs")]
    Infeasible { budget: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::Config(_) => "config",
            Error::MissingTeacher { .. } => "missing_teacher",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::EmptyDataset => "empty_dataset",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Format { .. } => "format",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Infeasible { .. } => "infeasible",
            Error::Io { .. } => "io",
            Error::Invalid(_) => "invalid",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
