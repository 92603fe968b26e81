use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown problem '{0}'")]
    UnknownProblem(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("root bracket not found: {0}")]
    RootBracket(String),

    #[error("degenerate weights: all likelihood weights are zero")]
    DegenerateWeights,

    #[error("no variability: all auxiliary limit-state values are equal")]
    NoVariability,

    #[error("mixture fit failed: {0}")]
    Fit(String),

    #[error("sampler failed: {0}")]
    Sampler(String),

    #[error("integration failed: {0}")]
    Integration(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
