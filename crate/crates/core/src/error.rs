use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("coordinate overflow: component {value} does not fit below {bound}")]
    Overflow { value: usize, bound: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("cell needs {tokens} tokens with delimiters, more than the sequence cap of {cap}")]
    CellTooLarge { tokens: usize, cap: usize },
    #[error("index {index} out of bounds for {table} with {rows} rows")]
    Index {
        table: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },
    #[error("sequence covers {cells} cells, need at least {needed}")]
    TooFewCells { cells: usize, needed: usize },
    #[error("no {segment} sequences can be built from the corpus")]
    NoSequences { segment: String },
    #[error("cannot pool an empty token set")]
    EmptyUnit,
    #[error("bundle has no trained {0} model")]
    MissingModel(String),
    #[error("range start {lo} is greater than range end {hi}")]
    RangeOrder { lo: f64, hi: f64 },
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("centroid clustering needs at least one exemplar")]
    EmptyExemplar,
    #[error("query {0} has no relevant items in the universe")]
    NoRelevant(String),
    #[error("unsupported bundle format: {0}")]
    Format(String),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Shape(_)
                | Error::Value(_)
                | Error::Config(_)
                | Error::Format(_)
                | Error::Checksum(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::RangeOrder { .. }
        )
    }
}
