use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path} at offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("version mismatch in {path} at offset {offset}: expected {expected}, found {found}")]
    Version {
        path: PathBuf,
        offset: u64,
        expected: String,
        found: String,
    },

    #[error(
        "truncated payload in {path} at offset {offset}: expected {expected} bytes, found {found}"
    )]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
        found: u64,
    },

    #[error("checksum failure in {path} at offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        offset: u64,
        stored: u32,
        computed: u32,
    },

    #[error("image {image_id} has no positive label")]
    NoPositiveLabel { image_id: u64 },

    #[error("non-finite loss at iteration {iteration} on image {image_id}")]
    NonFiniteLoss { iteration: usize, image_id: u64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag, used for one-line machine readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::NoPositiveLabel { .. } => "no_positive_label",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
        }
    }
}
