use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    /// Both sides of a merge were empty for at least one query row.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A cached external partial could not be used; the caller has to fall back to a full pass.
    #[error("cannot reuse cached attention: {0}")]
    ReusePrecondition(String),

    #[error("stale sparse mask: {0}")]
    StaleMask(String),

    #[error("head-gate calibration failed: {0}")]
    Calibration(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

pub(crate) use shape_err;
