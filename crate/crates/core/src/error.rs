use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("ingestion failed for {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },

    #[error("degenerate {0} stream: all reconstruction errors are zero")]
    DegenerateStream(String),

    #[error("AUC undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("invalid corpus spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite: {stage} output not found at {path} (run `stfuse {stage}` first)")]
    MissingPrerequisite { stage: &'static str, path: PathBuf },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::NonFinite { .. } | Error::DegenerateStream(_) | Error::UndefinedAuc => 4,
            _ => 1,
        }
    }
}
