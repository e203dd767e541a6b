use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ranks: {0}")]
    InvalidRanks(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("loadings {block} are not semi-orthogonal (deviation {deviation:.3e})")]
    NonOrthogonalLoadings { block: &'static str, deviation: f64 },

    #[error("concatenated loadings {block} are rank deficient")]
    RankDeficientConcatenation { block: &'static str },

    #[error("variance {name} must be positive, got {value}")]
    NonPositiveVariance { name: &'static str, value: f64 },

    #[error("joint components cannot be strictly ordered: tie at component {component}")]
    OrderingViolation { component: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("matrix is rank deficient (smallest singular value {smallest:.3e}, largest {largest:.3e})")]
    RankDeficient { smallest: f64, largest: f64 },

    #[error("latent posterior precision is not positive definite")]
    SingularLatentCovariance,

    #[error("second-moment matrix E[T'T] is singular at component {component}")]
    SingularMomentMatrix { component: usize },

    #[error("ranks need at least {needed} observations, data has {n}")]
    RanksExceedSampleSize { n: usize, needed: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("Fisher information for component {component} is not positive ({value:.3e}); use a resampling method")]
    NonPositiveInformation { component: usize, value: f64 },

    #[error("{failed} of {total} resampling refits failed")]
    ResamplingFailures { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: line {line}, column {column}: cannot parse {value:?} as a number")]
    NonNumericCell {
        path: String,
        line: usize,
        column: usize,
        value: String,
    },

    #[error("{path}: no data rows")]
    EmptyData { path: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
