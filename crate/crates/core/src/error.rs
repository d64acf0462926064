use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate marginal covariance")]
    DegenerateMarginal,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range for horizon {horizon}")]
    TimestepOutOfRange { t: usize, horizon: usize },

    #[error("mismatched horizons: expected {expected}, found {found}")]
    HorizonMismatch { expected: usize, found: usize },

    #[error("backward pass diverged at timestep {t}")]
    BackwardPassDiverged { t: usize },

    #[error("policy training diverged")]
    PolicyDiverged,

    #[error("infeasible pour: target {target} g with initial fill {fill} g")]
    InfeasiblePour { fill: f64, target: f64 },

    #[error("rollout produced a non-finite value at step {step}")]
    NonFiniteRollout { step: usize },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_trajectory(self, index: usize) -> Self {
        Error::Trajectory {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
