use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design: {0}")]
    InvalidDesign(String),

    #[error("design: sequence {sequence} period {period} has no treatment label")]
    DuplicateTreatmentInSequencePeriod { sequence: usize, period: usize },

    #[error("basis: time {time} outside domain [0, {domain}]")]
    TimeOutOfDomain { time: f64, domain: f64 },

    #[error("basis: {0}")]
    InvalidBasis(String),

    #[error("basis: second-difference penalty needs dimension >= 3, got {dim}")]
    PenaltyOrderTooHigh { dim: usize },

    #[error("estimability: {0}")]
    AssumptionFailed(String),

    #[error("estimability: design not estimable ({0}); set allow_rank_deficient to override")]
    NotEstimable(String),

    #[error("glm: variance function degenerate at observation {index}")]
    DegenerateVariance { index: usize },

    #[error("correlation: working correlation not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("correlation: {0}")]
    InsufficientData(String),

    #[error("pgee: singular system in block {0}")]
    SingularSystem(String),

    #[error("pgee: data shape mismatch, expected {expected} rows, found {found}")]
    DataShapeMismatch { expected: usize, found: usize },

    #[error("pgee: {0}")]
    InvalidModel(String),

    #[error("pgee: no convergence after {iterations} iterations (last change {change:e})")]
    NotConverged { iterations: usize, change: f64 },

    #[error("inference: sandwich bread is singular")]
    SingularBread,

    #[error("inference: contrast has zero variance")]
    ZeroVariance,

    #[error("tuning: quasi-likelihood is not finite")]
    NonFiniteQuasiLikelihood,

    #[error("tuning: effective degrees of freedom {trace} >= number of observations {n}")]
    EffectiveDofTooLarge { trace: f64, n: usize },

    #[error("tuning: leave-one-cluster-out needs at least 3 units, got {0}")]
    TooFewUnits(usize),

    #[error("input: missing column `{0}`")]
    MissingColumn(String),

    #[error("input: incomplete panel for unit {unit} period {period}")]
    IncompletePanel { unit: String, period: usize },

    #[error("input: non-numeric value in column `{column}` at line {line}")]
    NonNumericValue { line: usize, column: String },

    #[error("input: {0}")]
    InvalidInput(String),

    #[error("config: {0}")]
    InvalidConfig(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NotConverged { .. }
                | Error::SingularSystem(_)
                | Error::SingularBread
                | Error::ZeroVariance
                | Error::NonFiniteQuasiLikelihood
                | Error::EffectiveDofTooLarge { .. }
                | Error::DegenerateVariance { .. }
        )
    }
}
