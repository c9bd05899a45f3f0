use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("volume has constant intensity {0}; cannot rescale")]
    DegenerateVolume(f32),

    #[error("invalid window plan: {0}")]
    InvalidPlan(String),

    #[error("inconsistent window set: {0}")]
    InconsistentWindowSet(String),

    #[error("format error in {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("scanner label error: {0}")]
    Label(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown scanner id {0:?}")]
    Lookup(String),

    #[error("optimizer did not converge after {iterations} iterations: {trace}")]
    Convergence { iterations: usize, trace: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("non-finite loss at iteration {iteration}: {report}")]
    NonFinite { iteration: u64, report: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
