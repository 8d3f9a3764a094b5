use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate plane: edge vectors are zero or parallel (|e_w x e_h| = {0:e})")]
    DegeneratePlane(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("extent mismatch: expected {expected:?}, got {got:?}")]
    ExtentMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("bad magic: {0}")]
    BadMagic(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("degenerate frame pair: NCC = {0} is within epsilon of 1")]
    DegenerateFramePair(f64),

    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
