use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design matrix is rank deficient; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("observation weight at row {row} is not strictly positive ({value})")]
    NonPositiveWeight { row: usize, value: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("design has {rows} rows but {cols} columns")]
    TooFewRows { rows: usize, cols: usize },

    #[error("duplicate column label `{0}`")]
    DuplicateLabel(String),

    #[error("column `{0}` not found in input")]
    MissingColumn(String),

    #[error("no usable rows remain after dropping incomplete records")]
    EmptyAfterFiltering,

    #[error("arm `{arm}` has {count} observation(s); at least {required} required")]
    SingletonArm {
        arm: String,
        count: usize,
        required: usize,
    },

    #[error("control arm `{0}` does not occur in the treatment column")]
    UnknownControlArm(String),

    #[error("stratum `{stratum}` has no observations in arm `{arm}`")]
    EmptyCell { stratum: String, arm: String },

    #[error("need at least {needed} strata, found {found}")]
    TooFewStrata { needed: usize, found: usize },

    #[error("bootstrap replicate {replicate} still had empty cells after {attempts} draws")]
    BootstrapCellFailure { replicate: usize, attempts: usize },

    #[error("invalid population spec at {pointer}: {message}")]
    InvalidSpec { pointer: String, message: String },

    #[error("average treatment variance matrix is singular (some arm has zero variance in every stratum)")]
    SingularAverageVariance,

    #[error("treatment variance is zero in every stratum")]
    ZeroVariance,

    #[error("propensity of arm {arm} is zero in stratum {stratum}")]
    ZeroPropensity { stratum: usize, arm: usize },

    #[error("weights have zero mean")]
    ZeroMeanWeights,

    #[error("cell (stratum {stratum}, arm {arm}) has non-integral count {value}")]
    NonIntegralCells {
        stratum: usize,
        arm: usize,
        value: f64,
    },

    #[error("all {excluded} rows have a non-positive estimated propensity score")]
    NonPositivePropensity { excluded: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input (files, columns, specs, arguments)
    /// rather than by a numerical breakdown of an estimator.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::EmptyAfterFiltering
                | Error::SingletonArm { .. }
                | Error::UnknownControlArm(_)
                | Error::InvalidSpec { .. }
                | Error::InvalidArgument(_)
                | Error::DuplicateLabel(_)
                | Error::DimensionMismatch { .. }
                | Error::NonIntegralCells { .. }
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
