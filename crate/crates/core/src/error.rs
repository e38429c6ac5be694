use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("row {row} has {found} fields, header has {expected}")]
    ArityMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{dropped} of {total} rows dropped during ingestion; check the schema hints")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("feature space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("key column mismatch: {0}")]
    KeyMismatch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("utility undefined: {0}")]
    UndefinedUtility(String),

    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),

    #[error("insufficient privacy budget for `{dataset}`: requested ({epsilon}, {delta}), remaining ({remaining_epsilon}, {remaining_delta})")]
    InsufficientBudget {
        dataset: String,
        epsilon: f64,
        delta: f64,
        remaining_epsilon: f64,
        remaining_delta: f64,
    },

    #[error("invalid bounds for `{column}`: hi ({hi}) must exceed lo ({lo})")]
    InvalidBounds { column: String, lo: f64, hi: f64 },

    #[error("key `{column}` has {distinct} distinct values, more than the limit of {limit}")]
    KeyCardinality {
        column: String,
        distinct: usize,
        limit: usize,
    },

    #[error("sketch file is corrupt: {0}")]
    Corrupt(String),

    #[error("checksum failure: {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u64, supported: u64 },

    #[error("dataset `{0}` is already registered")]
    DuplicateDataset(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
