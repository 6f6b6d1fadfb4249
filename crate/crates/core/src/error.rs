use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("input too short: need at least {needed} {unit}, got {got}")]
    InputLength {
        needed: usize,
        got: usize,
        unit: &'static str,
    },

    #[error("degenerate batch statistics: {0}")]
    DegenerateStatistics(String),

    #[error("state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("format error in {file}: field `{field}`: {detail}")]
    Format {
        file: String,
        field: &'static str,
        detail: String,
    },

    #[error("parse error in {file}: {detail}")]
    Parse { file: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
