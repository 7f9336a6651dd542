use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-30")]
    ZeroNorm,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite function value at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("embedding batch was produced by different encoder parameters")]
    StaleCache,
    #[error("pool has {0} elements, need at least 2")]
    PoolTooSmall(usize),
    #[error("anchor {0} is not a member of the pool")]
    AnchorOutsidePool(usize),
    #[error("normalizer argument must be positive, got {0}")]
    NonPositiveC(f64),
    #[error("sample {0} has no moving-average estimate yet")]
    UninitializedSample(usize),
    #[error("input must be positive: {0}")]
    NonPositiveInput(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("true normalizer at index {0} is not positive")]
    NonPositiveTruth(usize),
    #[error("prototype column {0} has norm below 1e-30")]
    ZeroNormColumn(usize),
    #[error("separate objective requires log-normalizer targets")]
    MissingTargets,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("invalid synthetic data spec: {0}")]
    InvalidSpec(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidSpec(_) => 2,
            Error::NonFiniteGradient { .. } | Error::NonFiniteEvaluation { .. } => 3,
            _ => 1,
        }
    }
}
