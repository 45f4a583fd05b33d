use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time t = {t} is outside the admissible range {range}")]
    TimeOutOfRange { t: f64, range: &'static str },

    #[error("{path}: parse error at row {row}, column {col}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("{0}: dataset is empty")]
    EmptyDataset(PathBuf),

    #[error("data matrix is identically zero")]
    ZeroData,

    #[error("non-finite state at node {node} (t = {t})")]
    NonFiniteState { node: usize, t: f64 },

    #[error("matrix is ill-conditioned (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("quadrature did not converge: {panels} vs {doubled} panels differ by {diff:.3e}")]
    QuadratureNotConverged { panels: usize, doubled: usize, diff: f64 },

    #[error("convex distance did not converge after {iterations} iterations (bounds [{lower:.3e}, {upper:.3e}])")]
    DistanceNotConverged {
        iterations: usize,
        lower: f64,
        upper: f64,
    },

    #[error("regions intersect at t = 1 (pair {0}, {1})")]
    RegionsIntersect(usize, usize),

    #[error("generator count {count} exceeds cap {cap}")]
    TooManyGenerators { count: usize, cap: usize },

    #[error("training diverged at epoch {epoch}: loss {loss:.3e} (initial {initial:.3e})")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("JSON error at line {line}, column {column}: {msg}")]
    Json { line: usize, column: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

/// Rejects `t >= 1` (and anything below zero) for quantities that divide by `1 - t`.
pub(crate) fn check_open_time(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            range: "[0, 1)",
        });
    }
    Ok(())
}
