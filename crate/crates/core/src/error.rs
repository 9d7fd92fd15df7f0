use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the svkit library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav decode error: {0}")]
    Decode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRate { expected: u32, actual: u32 },

    #[error("waveform of {duration:.3} s is shorter than the minimum chunk of {min_dur:.3} s")]
    ChunkTooShort { duration: f64, min_dur: f64 },

    #[error("input too short: {got} samples given, at least {min} required")]
    InputTooShort { got: usize, min: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("missing id: {0}")]
    MissingId(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
