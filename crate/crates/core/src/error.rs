use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },

    #[error("record {index}: rating {rating} outside [1, 5]")]
    RatingOutOfRange { index: usize, rating: f64 },

    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("id {id} out of range for {what} of size {size}")]
    IdOutOfRange {
        what: &'static str,
        id: usize,
        size: usize,
    },

    #[error("sequence of length {len} exceeds limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric divergence in {phase} (epoch {epoch}, batch {batch}): loss is {loss}")]
    Divergence {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("AUC undefined: {0}")]
    AucUndefined(&'static str),

    #[error("aggregation needs at least 2 runs, got {0}")]
    TooFewRuns(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
