use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("basis is rank deficient (singular value ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("requested {k} factors but only {available} are available")]
    KTooLarge { k: usize, available: usize },

    #[error("eigenvalue spectrum is empty or too short")]
    EmptySpectrum,

    #[error("lag {tau} is not smaller than series length {len}")]
    TauTooLarge { tau: usize, len: usize },

    #[error("sample too short: {0}")]
    SampleTooShort(String),

    #[error("calendar month {0} has no weekly observations")]
    EmptyMonth(String),

    #[error("non-positive price at index {index}")]
    NonPositivePrice { index: usize },

    #[error("inconsistent OHLC bar at index {index}: {reason}")]
    InvalidBar { index: usize, reason: String },

    #[error("non-zero return with zero volume on day {day}")]
    ZeroVolumeWithMove { day: usize },

    #[error("all market caps are zero at period {period}")]
    AllZeroCaps { period: usize },

    #[error("pooled covariance has no positive eigenvalue; no latent factor can be extracted")]
    FactorCountZero,

    #[error("order condition violated: {instruments} instruments for {regressors} regressors")]
    OrderConditionViolated { instruments: usize, regressors: usize },

    #[error("instrument weighting matrix is singular (condition number {condition:.3e})")]
    SingularWeighting { condition: f64 },

    #[error("moment Jacobian is rank deficient (singular value ratio {ratio:.3e})")]
    RankDeficientA { ratio: f64 },

    #[error("degrees of freedom exhausted: {observations} observations for {parameters} parameters")]
    DegreesOfFreedomExhausted { observations: usize, parameters: usize },

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("penalty grid is empty")]
    EmptyGrid,

    #[error("coordinate descent did not converge (duality gap {gap:.3e})")]
    NoConvergence { gap: f64 },

    #[error("{0} predictors exceed the exact Shapley enumeration limit")]
    TooManyPredictors(usize),

    #[error("regression design is rank deficient")]
    RankDeficientDesign,

    #[error("group {label} has {size} units; at least 2 are required")]
    GroupTooSmall { label: String, size: usize },

    #[error("groups {0} and {1} share units")]
    OverlappingGroups(String, String),

    #[error("index {index} out of range for pool of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("unit {unit}: {source}")]
    Unit {
        unit: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{} unit(s) failed; first: {}", .0.len(), .0.first().map(|e| e.to_string()).unwrap_or_default())]
    UnitFailures(Vec<Error>),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the data or configuration rather than by
    /// the numerics of an estimation step.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::DimensionMismatch(_)
            | Error::TauTooLarge { .. }
            | Error::SampleTooShort(_)
            | Error::EmptyMonth(_)
            | Error::NonPositivePrice { .. }
            | Error::InvalidBar { .. }
            | Error::ZeroVolumeWithMove { .. }
            | Error::AllZeroCaps { .. }
            | Error::OrderConditionViolated { .. }
            | Error::EmptyPool
            | Error::EmptyGrid
            | Error::TooManyPredictors(_)
            | Error::GroupTooSmall { .. }
            | Error::OverlappingGroups(..)
            | Error::IndexOutOfRange { .. }
            | Error::InvalidConfig(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Csv(_) => true,
            Error::Unit { source, .. } | Error::Context { source, .. } => source.is_validation(),
            Error::UnitFailures(errs) => errs.iter().all(Error::is_validation),
            _ => false,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
