use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0:?}: need finite coordinates with x2 > x1 and y2 > y1")]
    InvalidBox([f64; 4]),

    #[error("invalid score {0}: must be finite and in [0, 1]")]
    InvalidScore(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("unknown image id {0:?}")]
    UnknownImage(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("xml: {0}")]
    Xml(String),
}

impl Error {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
