use thiserror::Error;

/// Errors produced by the control, identification and experiment layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("topology is not connected after {retries} attempts")]
    NotConnected { retries: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("mixing bound violated at k={k}, column {i}: {lhs} > {rhs}")]
    BoundViolated { k: usize, i: usize, lhs: f64, rhs: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("closed loop is not stable (spectral radius {spectral_radius})")]
    NotStable { spectral_radius: f64 },

    #[error("eigenbasis too ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("rank deficient: smallest singular value {sigma_min:e}")]
    RankDeficient { sigma_min: f64 },

    #[error("pair is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("stability margin exhausted: eps={eps} >= gamma/(2 kappa^3)={limit}")]
    MarginExhausted { eps: f64, limit: f64 },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("analytic gradient unsupported for this cost: {0}")]
    UnsupportedCost(String),

    #[error("parameters not in constraint set: block {block} has norm {norm} > radius {radius}")]
    NotInSet { block: usize, norm: f64, radius: f64 },

    #[error("state diverged at round {t}, agent {agent}: |x|={norm:e} exceeds {limit:e}")]
    Diverged { t: usize, agent: usize, norm: f64, limit: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("estimate unusable for agent {agent}: eps={eps} >= gamma/(2 kappa^3)={limit}")]
    EstimateUnusable { agent: usize, eps: f64, limit: f64 },

    #[error("empty policy grid")]
    EmptyGrid,

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("non-positive regret {regret} at T={t}")]
    NonPositiveRegret { t: usize, regret: f64 },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("artifact schema version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
