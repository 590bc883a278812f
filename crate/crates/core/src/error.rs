use std::path::PathBuf;

use mmgpl_diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("partition: axis {axis} of length {len} is not divisible by patch size {size}")]
    Partition {
        axis: &'static str,
        len: usize,
        size: usize,
    },

    #[error("concept bank invalid at {location}: {msg}")]
    Bank { location: String, msg: String },

    #[error("fetch: {0}")]
    Fetch(String),

    #[error("fetch transport: {0}")]
    Network(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
