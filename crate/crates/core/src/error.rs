use std::io;

use thiserror::Error;

/// Errors raised across the toolchain.
///
/// Capacity violations are not errors here: `deploy::check_buffers` returns
/// them as a value so callers can report the offending step.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("architecture error: {0}")]
    Arch(String),
    #[error("model io error: {0}")]
    ModelIo(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("state error: {0}")]
    State(String),
    #[error("quantization error: {0}")]
    Quant(String),
    #[error("prune error at layer {layer}: {reason}")]
    Prune { layer: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable kind tag, used by the CLI verdict lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::Arch(_) => "ArchError",
            Error::ModelIo(_) => "ModelIOError",
            Error::Argument(_) => "ArgumentError",
            Error::State(_) => "StateError",
            Error::Quant(_) => "QuantError",
            Error::Prune { .. } => "PruneError",
            Error::Data(_) => "DataError",
            Error::Io(_) => "IOError",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::ModelIo(format!("json: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(io::Error::other(e))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
