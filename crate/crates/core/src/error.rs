use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("vector norm {0:e} is too small to normalize")]
    ZeroVector(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("layer specification is empty or has a zero-sized layer")]
    EmptySpec,
    #[error("forward trace does not match parameters: {0}")]
    TraceMismatch(String),
    #[error("queue is empty")]
    EmptyQueue,
    #[error("queue holds {0} entries, at least 2 are required")]
    QueueTooSmall(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite gradient in parameter update")]
    NonFiniteGrad,
    #[error("similarity row {0} has no negative entries")]
    RowWithoutNegatives(usize),
    #[error("invalid corpus sizes: {0}")]
    InvalidSizes(String),
    #[error("total ground truth must be positive")]
    ZeroGroundTruth,
    #[error("no query has ground truth")]
    NoEvaluableQueries,
    #[error("background set has {have} descriptors, k={k} requested")]
    BackgroundTooSmall { have: usize, k: usize },
    #[error("descriptor set has {0} rows, at least 2 are required")]
    DegenerateSet(usize),
    #[error("no query has both a ground-truth reference and a negative reference")]
    NoGroundTruth,
    #[error("whitening fit set has {rows} rows in dimension {dim}; more rows than dimensions are required")]
    FitTooSmall { rows: usize, dim: usize },
    #[error("fit set is rank deficient (top eigenvalue {0:e})")]
    RankDeficientFit(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed file: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
