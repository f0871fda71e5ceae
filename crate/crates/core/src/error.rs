//! Error type shared by every module.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes. Input problems are "validation" errors; everything raised
/// by a solver, decomposition or integrator is "numerical".
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("treatment is not a valid binary indicator: {0}")]
    NonBinaryTreatment(String),
    #[error("non-finite or unparsable value at row {row}, column `{col}`")]
    NonFiniteValue { row: usize, col: String },
    #[error("stratum `{0}` needs at least two units and both treatment arms")]
    DegenerateStratum(String),
    #[error("too few rows: n = {n}, need at least {needed}")]
    TooFewRows { n: usize, needed: usize },
    #[error("outcome `{0}` is constant across the sample")]
    ConstantOutcome(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weight at row {index} is not positive")]
    NonPositiveWeight { index: usize },
    #[error("treatment indicator has no variation")]
    DegenerateTreatment,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("design matrix is rank deficient (columns {columns:?})")]
    RankDeficient { columns: Vec<usize> },
    #[error("matrix is numerically singular (smallest eigenvalue {min_eigenvalue:e})")]
    NearSingular { min_eigenvalue: f64 },
    #[error("eigenvalue {value:e} is too negative for a positive semi-definite input")]
    NegativeEigenvalue { value: f64 },
    #[error("eigendecomposition did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("logistic fit separated or diverged: {0}")]
    Separation(String),
    #[error("numerical integration failed: {0}")]
    IntegrationFailure(String),
    #[error("covariate composite has zero estimated variance; r_opt is undefined")]
    ZeroVarianceX,
    #[error("in stratum `{label}`: {source}")]
    InStratum {
        label: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for malformed input, false for numerical failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::MissingColumn(_)
            | Error::NonBinaryTreatment(_)
            | Error::NonFiniteValue { .. }
            | Error::DegenerateStratum(_)
            | Error::TooFewRows { .. }
            | Error::ConstantOutcome(_)
            | Error::InvalidSpec(_)
            | Error::DimensionMismatch(_)
            | Error::NonPositiveWeight { .. }
            | Error::DegenerateTreatment
            | Error::Io(_)
            | Error::Csv(_) => true,
            Error::InStratum { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::NonBinaryTreatment(_) => "NonBinaryTreatment",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::DegenerateStratum(_) => "DegenerateStratum",
            Error::TooFewRows { .. } => "TooFewRows",
            Error::ConstantOutcome(_) => "ConstantOutcome",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonPositiveWeight { .. } => "NonPositiveWeight",
            Error::DegenerateTreatment => "DegenerateTreatment",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::NearSingular { .. } => "NearSingular",
            Error::NegativeEigenvalue { .. } => "NegativeEigenvalue",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::Separation(_) => "Separation",
            Error::IntegrationFailure(_) => "IntegrationFailure",
            Error::ZeroVarianceX => "ZeroVarianceX",
            Error::InStratum { source, .. } => source.kind(),
        }
    }
}
