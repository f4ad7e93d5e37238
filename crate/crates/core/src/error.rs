use std::path::PathBuf;

use glab_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error("attack failed: {0}")]
    Attack(String),

    #[error("training diverged at round {round}: {msg}")]
    Diverged { round: usize, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid { what, msg: msg.into() }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
