use dabd_runtime::RuntimeError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] dabd_core::Error),

    #[error(transparent)]
    Runtime(#[from] RuntimeError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
