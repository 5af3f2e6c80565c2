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

    /// A header or sidecar field is missing or cannot be interpreted.
    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Operation requested on a model of the wrong kinematics.
    #[error("mode error: {0}")]
    Mode(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite mapped coordinate at voxel ({x}, {y}, {z})")]
    NonFiniteMap { x: usize, y: usize, z: usize },

    #[error("time {t} is not on the 1/{steps} integration grid")]
    OffGrid { t: f64, steps: usize },

    /// `report` holds the trace up to the failing step when raised by a solve.
    #[error("optimization diverged at step {step}: {message}")]
    Diverged {
        step: usize,
        message: String,
        report: Option<Box<crate::optimizer::SolveReport>>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
