use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants split into I/O failures and validation failures so that
/// front-ends can map them onto distinct exit codes (see [`Error::is_io`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty trace")]
    EmptyTrace,
    #[error("unsupported version: {0}")]
    UnsupportedVersion(String),
    #[error("layer {layer}: expected {expected} bytes, found {found}")]
    LayerLength {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty label set: {0}")]
    EmptyLabelSet(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown token: {0:?}")]
    UnknownToken(String),
    #[error("neuron out of range: layer {layer}, index {index}")]
    NeuronOutOfRange { layer: usize, index: usize },
    #[error("no VA neurons selected")]
    NoNeurons,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("record mismatch: {0}")]
    RecordMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
