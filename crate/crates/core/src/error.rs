use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite state after {step} integration steps")]
    NonFiniteState { step: usize },

    #[error("feature window has {got} states, expected {expected}")]
    WindowLengthMismatch { expected: usize, got: usize },

    #[error("trajectory {index} has {len} states, need at least {needed}")]
    TrajectoryTooShort {
        index: usize,
        len: usize,
        needed: usize,
    },

    #[error("normal matrix is not positive definite (lambda = {lambda})")]
    SingularNormalMatrix { lambda: f64 },

    #[error("condition number of a zero matrix is undefined")]
    ZeroMatrix,

    #[error("subspace has rank zero")]
    RankZero,

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFiniteState { .. } => "non_finite_state",
            Error::WindowLengthMismatch { .. } => "window_length_mismatch",
            Error::TrajectoryTooShort { .. } => "trajectory_too_short",
            Error::SingularNormalMatrix { .. } => "singular_normal_matrix",
            Error::ZeroMatrix => "zero_matrix",
            Error::RankZero => "rank_zero",
            Error::SpecMismatch(_) => "spec_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
