use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("variable {0} does not belong to this tape")]
    UnknownLeaf(usize),

    #[error("target contains values other than 0 and 1")]
    TargetNotBinary,

    #[error("mask contains values other than 0 and 1")]
    NotBinary,

    #[error("uncertainty decomposition needs at least one sample")]
    EmptySampleList,

    #[error("evaluation set is empty")]
    EmptySet,

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("bad dimensions: {0}")]
    BadDims(String),

    #[error("not a binary PGM (P5) file")]
    BadMagic,

    #[error("file is truncated")]
    TruncatedFile,

    #[error("unsupported PGM maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint does not match network configuration: {0}")]
    ConfigShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
