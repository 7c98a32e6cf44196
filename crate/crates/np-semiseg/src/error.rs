use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config errors exit 2, data/format errors exit 3, numeric errors exit 4.
#[derive(Debug, Error)]
pub enum NpError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("loss undefined: {0}")]
    LossUndefined(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl NpError {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            NpError::Config(_) => 2,
            NpError::Numeric(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, NpError>;
