use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("point index {index} out of range for a space of {n} points")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("space of {n} points exceeds the configured cap of {cap}")]
    SizeLimit { n: usize, cap: usize },

    #[error("missing decoration `{0}`")]
    MissingDecoration(String),

    #[error("decoration `{name}` is not a {expected} decoration")]
    DecorationKind { name: String, expected: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("negative value in {0}")]
    Negative(String),

    #[error("zero total mass")]
    ZeroMass,

    #[error("kernel row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },

    #[error("normalization violated: {0}")]
    Normalization(String),

    #[error("Palm distribution undefined: intensity is {0}")]
    PalmUndefined(f64),

    #[error("unequal totals: source {source_total} vs target {target_total}")]
    UnequalTotals { source_total: f64, target_total: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown transport function `{0}`")]
    UnknownTransport(String),

    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),

    #[error("duplicate marks on tied points {0} and {1}")]
    DuplicateMarks(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("per-point seed derivation produced a collision")]
    SeedCollision,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
