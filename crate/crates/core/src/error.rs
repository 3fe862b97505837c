use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

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

    /// True for errors caused by invalid user input rather than a failure at
    /// run time. The CLI maps these to a distinct exit code.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
