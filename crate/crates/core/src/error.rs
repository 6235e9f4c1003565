use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the auditing library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("group `{group}` has no qualified members")]
    ZeroQualifiedGroup { group: String },

    #[error("distribution length mismatch: expected {expected} bins, found {found}")]
    GroupCountMismatch { expected: usize, found: usize },

    #[error("at least two groups are required, found {found}")]
    TooFewGroups { found: usize },

    #[error("epsilon must be finite and > 0, got {0}")]
    InvalidEpsilon(f64),

    #[error("privacy budget exhausted: requested {requested}, remaining {remaining}")]
    BudgetExhausted { requested: f64, remaining: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("epsilon {epsilon} must exceed alpha/2 = {half_alpha} for the private sample bound to hold")]
    EpsilonTooSmall { epsilon: f64, half_alpha: f64 },

    #[error("invalid score domain: {0}")]
    InvalidDomain(String),

    #[error("operation requires a {expected} score domain")]
    WrongDomainKind { expected: &'static str },

    #[error("invalid group mix: {0}")]
    InvalidMix(String),

    #[error("insufficient population: requested {requested}, available {available}")]
    InsufficientPopulation { requested: usize, available: usize },

    #[error("audience is empty")]
    EmptyAudience,

    #[error("audience mixes attributes `{first}` and `{other}`")]
    MixedGroupAudience { first: String, other: String },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
