use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("column {0} has zero sample variance")]
    DegenerateColumn(usize),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("covariance sub-block is numerically singular")]
    SingularCovariance,

    #[error("quadratic program did not converge within {iterations} active-set iterations")]
    QpNoConvergence { iterations: usize },

    #[error("empirical likelihood solver stopped after {iterations} iterations with KKT residual {residual:e}")]
    TiltNoConvergence { iterations: usize, residual: f64 },

    #[error("selection rule needs J <= {cap}, got J = {j}")]
    DimensionCap { j: usize, cap: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{skipped} of {total} bootstrap replicates had a degenerate column")]
    TooManyDegenerate { skipped: usize, total: usize },

    #[error("missing RMS table: {0}")]
    MissingTable(String),

    #[error("no RSW baseline for statistic {0}; run RSW alongside the other procedures")]
    MissingBaseline(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("replication {index} failed")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
