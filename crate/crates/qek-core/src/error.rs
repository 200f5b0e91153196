//! Crate-wide error type.
//!
//! Variants are grouped loosely by pipeline stage; the CLI maps them onto
//! exit codes (validation-class errors exit 2, runtime-class errors exit 3).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `line` is 1-based when known.
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse {
        path: String,
        line: Option<usize>,
        message: String,
    },

    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// One message per violated constraint, in check order.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("graph {id}: {reason}")]
    Unembeddable { id: u64, reason: String },

    #[error("atom count {n} exceeds cap {cap}")]
    CapacityExceeded { n: usize, cap: usize },

    #[error("integration failed in segment {segment}: {message}")]
    Integration { segment: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("distribution not normalized (sum {sum})")]
    NotNormalized { sum: f64 },

    #[error("value {value} outside binning support [{lo}, {hi}]")]
    OutOfSupport { value: f64, lo: f64, hi: f64 },

    #[error("training set contains a single class")]
    SingleClass,

    #[error("kernel matrix not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },

    #[error("graph id mismatch: {0}")]
    IdMismatch(String),

    #[error("graph {graph_id}: requested {requested} shots but only {kept} kept")]
    ShotCount {
        graph_id: u64,
        requested: usize,
        kept: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: impl Into<Option<usize>>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line: line.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema { .. }
                | Error::Config(_)
                | Error::Validation(_)
                | Error::EmptyInput(_)
        )
    }
}
