use std::path::PathBuf;

/// Crate-wide error type. The CLI maps each variant onto a stable process
/// exit code, so keep the classification coarse and meaningful.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or semantically invalid configuration input.
    #[error("config error: {0}")]
    Config(String),

    /// The requested network/hardware combination cannot be planned
    /// (e.g. buffers exceed the budget).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A verification run found a mismatch between execution paths.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Underlying I/O failure, annotated with the path when known.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A serialized artifact (checkpoint, report) has an unsupported version
    /// or a corrupt header.
    #[error("bad artifact: {0}")]
    Artifact(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code contract: 0 ok, 2 config, 3 infeasible,
    /// 4 verification, 5 I/O or artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Infeasible(_) => 3,
            Error::Verification(_) => 4,
            Error::Io { .. } | Error::Artifact(_) => 5,
        }
    }
}
