use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what}: index {index} out of range for length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{0}: empty axis")]
    EmptyAxis(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{param}` (first bad entry {index}: {value})")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },

    #[error("question needs {needed} tokens but max_len is {max_len}")]
    Capacity { needed: usize, max_len: usize },

    #[error("answer span chars {char_start}..{char_end} falls outside the kept context (kept {kept} chars)")]
    UnrepresentableSpan {
        char_start: usize,
        char_end: usize,
        kept: usize,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("record `{id}` failed validation: {reason}")]
    Validation { id: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
