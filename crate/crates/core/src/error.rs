use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("action index {index} out of range for {count} actions")]
    InvalidAction { index: usize, count: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("zero total mass: {0}")]
    ZeroMass(&'static str),
    #[error("no clusters: every point was labeled noise")]
    NoClusters,
    #[error("invalid probability table: {0}")]
    InvalidTable(String),
    #[error("unknown value {0}")]
    UnknownValue(String),
    #[error("feature bound violated: {0}")]
    BoundViolated(String),
    #[error("internal check failed: {0}")]
    CheckFailed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
