use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid triple {index} ({triple}): {message}")]
    InvalidTriple {
        index: usize,
        triple: String,
        message: String,
    },
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("sequence too long: a single triple needs {needed} tokens but the limit is {limit}")]
    TripleTooLong { needed: usize, limit: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("softmax over a row with no finite entries (row {row})")]
    DegenerateSoftmax { row: usize },
    #[error("unit {0} has no tokens assigned")]
    EmptyUnit(usize),
    #[error("target id {id} outside vocabulary of size {size}")]
    TargetOutOfVocab { id: u32, size: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::InvalidTriple { .. } | Error::InvalidExample(_) => "validation",
            Error::TripleTooLong { .. } => "too_long",
            Error::Shape { .. } => "shape",
            Error::DegenerateSoftmax { .. } => "softmax",
            Error::EmptyUnit(_) => "span",
            Error::TargetOutOfVocab { .. } => "vocab",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Metric(_) => "metric",
            Error::CheckFailed(_) => "check_failed",
            Error::Usage(_) => "usage",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
