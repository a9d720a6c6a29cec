use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("{what}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what}: non-positive value {value} at valid pixel {index}")]
    NonPositive {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{what}: no valid pixels")]
    EmptyMask { what: &'static str },
    #[error("{format} file malformed at byte offset {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: u64,
        msg: String,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        msg: msg.into(),
    }
}
