use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("row {row} has norm {norm}, exceeding 1")]
    RowNormExceeded { row: usize, norm: f64 },

    #[error("label at row {row} is {value}, expected -1 or +1")]
    InvalidLabel { row: usize, value: f64 },

    #[error("privacy plan rejected: {reason}")]
    PlanRejected { reason: String },

    #[error("epsilon {requested} is infeasible: the minimal achievable epsilon is {min_epsilon} (epsilon below K*2.8c2/(cn))")]
    InfeasibleBudget { requested: f64, min_epsilon: f64 },

    #[error("solver diverged at outer iteration {outer}, inner step {inner}: {reason}")]
    Divergence {
        outer: usize,
        inner: usize,
        reason: String,
    },

    #[error("parse error at row {row}, column `{column}`: {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
