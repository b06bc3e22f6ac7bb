use thiserror::Error;

/// Errors raised by estimation, resampling, simulation and I/O.
///
/// Row and column positions carried by variants are 1-based.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("mismatched lengths: {what}")]
    MismatchedLengths { what: String },

    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: usize },

    #[error("timestamps not strictly increasing at row {row}")]
    NonMonotoneTime { row: usize },

    #[error("empty series")]
    EmptySeries,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("kernel weight sum degenerate at z = {z}")]
    DegenerateWeights { z: f64 },

    #[error("local-linear design is singular at z = {z}")]
    SingularLocalFit { z: f64 },

    #[error("variance below floor at z = {z}, channel {channel}")]
    VarianceFloorHit { z: f64, channel: usize },

    #[error("every bandwidth candidate is degenerate on some fold")]
    AllCandidatesDegenerate,

    #[error("block span too large: {span} for {n} rows")]
    SpanTooLarge { span: usize, n: usize },

    #[error("timestamps cover fewer than two calendar blocks")]
    EmptyCalendarBlocks,

    #[error("{failed} of {total} bootstrap replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("fewer than two finite replicate values at z = {z}")]
    InsufficientReplicates { z: f64 },

    #[error("bands and truth are defined on different grids")]
    GridMismatch,

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("scenario covariance is not positive semidefinite at z = {z}")]
    NonPsdAtTemperature { z: f64 },

    #[error("every dataset of the coverage study failed")]
    AllDatasetsFailed,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("unparseable cell at row {row}, column `{column}`")]
    UnparseableCell { row: usize, column: String },

    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(i64),

    #[error("column `{0}` has no observed values")]
    ColumnAllMissing(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the estimation itself rather than of its inputs.
    pub fn is_estimation_failure(&self) -> bool {
        matches!(
            self,
            Error::DegenerateWeights { .. }
                | Error::SingularLocalFit { .. }
                | Error::VarianceFloorHit { .. }
                | Error::AllCandidatesDegenerate
                | Error::TooManyFailures { .. }
                | Error::InsufficientReplicates { .. }
                | Error::NonPsdAtTemperature { .. }
                | Error::AllDatasetsFailed
                | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Malformed(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
