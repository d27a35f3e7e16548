use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid probability table: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("behavior policy has zero probability at state {state}, action {action}")]
    ZeroBehaviorProbability { state: usize, action: usize },

    #[error("bound inapplicable: epsilon {epsilon} is outside the convergence radius {radius}")]
    OutsideRadius { epsilon: f64, radius: f64 },

    #[error("linear system is singular")]
    SingularSystem,

    #[error("empty trajectory batch")]
    EmptyBatch,

    #[error("trajectory of length {len} is too short (need at least {min})")]
    TrajectoryTooShort { len: usize, min: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
