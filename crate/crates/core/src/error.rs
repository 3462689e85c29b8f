use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state encountered at t = {t}")]
    BlowUp { t: f64 },

    #[error("unknown catalogue entry `{0}`")]
    UnknownName(String),

    #[error("malformed parameters for `{name}`: {reason}")]
    MalformedParams { name: String, reason: String },

    #[error("missing field metadata: {0}")]
    MissingMetadata(String),

    #[error("enumeration budget exceeded: {required} rollouts requested, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("time {t} is a control discontinuity")]
    NotLebesguePoint { t: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("marginal mismatch: {0}")]
    MarginalMismatch(String),

    #[error("witness is not 1-Lipschitz on the support: |phi(x_{i}) - phi(x_{j})| = {gap} > {dist}")]
    NotLipschitz { i: usize, j: usize, gap: f64, dist: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
