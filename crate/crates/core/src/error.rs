use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid geometry: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange { what: &'static str, index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {detail}")]
    Format { context: &'static str, detail: String },

    #[error("dataset error in {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("empty-space skipping needs an occupancy volume")]
    MissingOccupancy,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn format(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { context, detail: detail.into() }
    }
}
