use std::path::PathBuf;

use thiserror::Error;

/// Error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("range error at `{key}`: {msg}")]
    Range { key: String, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid NIfTI file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unsupported NIfTI datatype code {code} in {path}")]
    UnsupportedDtype { path: PathBuf, code: i16 },

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid label {label} (num_classes = {num_classes})")]
    InvalidLabel { label: i64, num_classes: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate latent range: lo = hi = {0}")]
    DegenerateRange(f64),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error("sampling diverged at t = {t}: non-finite latent")]
    SamplingDivergence { t: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
