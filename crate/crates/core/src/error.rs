use thiserror::Error;

/// Which data block a column index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Covariates,
    Outcomes,
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Block::Covariates => f.write_str("covariate"),
            Block::Outcomes => f.write_str("outcome"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{block} column {index} has zero variance and cannot be standardized")]
    ZeroVarianceColumn { block: Block, index: usize },

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("treatment at row {row} is {value}; expected 0 or 1")]
    InvalidTreatment { row: usize, value: f64 },

    #[error("treatment arm {0} has no units")]
    ArmMissing(u8),

    #[error("dataset has no rows")]
    Empty,

    #[error("perfect separation detected while fitting the propensity model")]
    Separation,

    #[error("propensity fit did not converge after {0} iterations")]
    NonConvergence(usize),

    #[error("design matrix is singular even after ridge regularisation")]
    SingularDesign,

    #[error("{0} covariance is not invertible after ridge regularisation")]
    SingularCovariance(&'static str),

    #[error("rank {rank} outside [1, {max}]")]
    RankTooLarge { rank: usize, max: usize },

    #[error("need more rows than covariates (n = {n}, p = {p})")]
    TooFewRows { n: usize, p: usize },

    #[error("no fitted outcome model for arm {0}")]
    ModelMissingForArm(u8),

    #[error("propensity {value} at row {row} is degenerate and clipping is disabled")]
    PropensityOutOfRange { row: usize, value: f64 },

    #[error("data is not standardized; standardize first or set allow_unstandardized")]
    NotStandardized,

    #[error("invalid estimator specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("objective or gradient became non-finite at iteration {iteration}")]
    NonFiniteValue {
        iteration: usize,
        last_good: Vec<f64>,
    },

    #[error("{skipped} of {total} replications failed to fit, above the configured skip limit")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Runtime,
    Data,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidSpec(_) | InvalidConfig(_) | RankTooLarge { .. } => ErrorClass::Config,
            Separation
            | NonConvergence(_)
            | SingularDesign
            | SingularCovariance(_)
            | NonFiniteValue { .. }
            | TooManySkipped { .. }
            | Io(_) => ErrorClass::Runtime,
            DimensionMismatch { .. }
            | ZeroVarianceColumn { .. }
            | NonFiniteInput(_)
            | InvalidTreatment { .. }
            | ArmMissing(_)
            | Empty
            | TooFewRows { .. }
            | ModelMissingForArm(_)
            | PropensityOutOfRange { .. }
            | NotStandardized
            | Schema(_)
            | Csv(_)
            | Json(_) => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
