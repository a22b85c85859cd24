use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps onto one of the process exit codes used by the CLI
/// (2 = configuration, 3 = data, 4 = numeric failure).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("llm client error: {0}")]
    Llm(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            Error::Data(_)
            | Error::Shape(_)
            | Error::MissingArtifact { .. }
            | Error::Io { .. }
            | Error::Llm(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
