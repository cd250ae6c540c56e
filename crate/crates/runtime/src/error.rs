use std::io;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Core(#[from] dabd_core::Error),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("transport error: {0}")]
    Io(#[from] io::Error),

    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error("peer disconnected: {0}")]
    Disconnected(String),

    #[error("run aborted: {0}")]
    Aborted(String),
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;
