use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: target {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("span error: {0}")]
    Span(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("degenerate posterior: normalizer is {0}")]
    DegeneratePosterior(f64),

    #[error("degenerate transition row {row}: off-diagonal row sum is {sum}")]
    DegenerateRow { row: usize, sum: f64 },

    #[error("invalid transition matrix: {0}")]
    Transition(String),

    #[error("flow constraint error: {0}")]
    Constraint(String),

    #[error("planar inversion error: {0}")]
    Inversion(String),

    #[error("projection error: {0}")]
    Projection(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}, field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
