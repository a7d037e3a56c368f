use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("ingestion error at byte offset {offset}: {message}")]
    Ingest { offset: u64, message: String },

    #[error("corrupt record at byte offset {offset}: label byte {label} is not a valid class")]
    CorruptRecord { offset: u64, label: u8 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid architecture descriptor: {0}")]
    Descriptor(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
