use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("column/kind mismatch: {0}")]
    KindMismatch(String),

    #[error("population needs at least 2 units, got {0}")]
    TooFewUnits(usize),

    #[error("non-finite outcome at unit {unit}")]
    NonFinite { unit: usize },

    #[error("expected a {expected} population")]
    WrongKind { expected: &'static str },

    #[error("proportion {0} is outside (0, 1)")]
    InvalidProportion(f64),

    #[error("margin {margin} out of range [1, {max}] for N = {n_units}")]
    MarginOutOfRange {
        margin: usize,
        n_units: usize,
        max: usize,
    },

    #[error("enumeration needs {required} assignments but the cap is {cap}")]
    CapExceeded { required: u128, cap: u64 },

    #[error("unknown functional `{0}`")]
    UnknownFunctional(String),

    #[error("functional `{functional}` takes {expected} argument(s), got {got}")]
    ArityMismatch {
        functional: String,
        expected: usize,
        got: usize,
    },

    #[error("`{functional}` is undefined at coordinate {coordinate} (value {value})")]
    DomainViolation {
        functional: String,
        coordinate: usize,
        value: f64,
    },

    #[error("domain violation at assignment {assignment}: {source}")]
    DomainAtAssignment {
        assignment: String,
        #[source]
        source: Box<Error>,
    },

    #[error("arm {arm} has {size} unit(s); at least 2 are required")]
    ArmTooSmall { arm: usize, size: usize },

    #[error("nonpositive outcome {value} at unit {unit} (arm {arm})")]
    NonPositiveOutcome { unit: usize, arm: usize, value: f64 },

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("the true delta-method variance is zero")]
    ZeroTrueVariance,

    #[error("constant population: condition ratio is undefined")]
    ConstantPopulation,

    #[error("level {0} is outside (0, 1)")]
    InvalidLevel(f64),

    #[error("probability {0} is outside (0, 1)")]
    InvalidProbability(f64),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{failures} of {replications} replicates failed (limit 0.1%)")]
    FailureRateExceeded { failures: usize, replications: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "malformed_row",
            Error::KindMismatch(_) => "kind_mismatch",
            Error::TooFewUnits(_) => "too_few_units",
            Error::NonFinite { .. } => "non_finite",
            Error::WrongKind { .. } => "wrong_kind",
            Error::InvalidProportion(_) => "invalid_proportion",
            Error::MarginOutOfRange { .. } => "margin_out_of_range",
            Error::CapExceeded { .. } => "cap_exceeded",
            Error::UnknownFunctional(_) => "unknown_functional",
            Error::ArityMismatch { .. } => "arity_mismatch",
            Error::DomainViolation { .. } => "domain_violation",
            Error::DomainAtAssignment { .. } => "domain_violation",
            Error::ArmTooSmall { .. } => "arm_too_small",
            Error::NonPositiveOutcome { .. } => "nonpositive_outcome",
            Error::NonPositiveVariance(_) => "nonpositive_variance",
            Error::ZeroTrueVariance => "zero_true_variance",
            Error::ConstantPopulation => "constant_population",
            Error::InvalidLevel(_) => "invalid_level",
            Error::InvalidProbability(_) => "invalid_probability",
            Error::EmptyInput => "empty_input",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::FailureRateExceeded { .. } => "failure_rate_exceeded",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
