use std::path::PathBuf;

use crate::types::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Backend,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("manifest {0} is empty; class names are unknown")]
    EmptyManifest(PathBuf),

    #[error("missing predictions for {} item(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("annotation incomplete; no clean label for: {}", .0.join(", "))]
    AnnotationIncomplete(Vec<String>),

    #[error("class index {index} out of range for {num_classes} classes")]
    Index { index: usize, num_classes: usize },

    #[error("support set has no exemplar for class {0}")]
    MissingExemplarClass(ClassId),

    #[error("in-context length {got} exceeds the maximum of {max}")]
    Length { got: usize, max: usize },

    #[error("capability not available: {0}")]
    Capability(String),

    #[error("backend error{}: {message}", .item.as_deref().map(|i| format!(" for {i}")).unwrap_or_default())]
    Backend {
        item: Option<String>,
        message: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Length { .. } => ErrorKind::Config,
            Error::Backend { .. } | Error::Capability(_) => ErrorKind::Backend,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(item: Option<&str>, message: impl Into<String>) -> Self {
        Error::Backend {
            item: item.map(str::to_owned),
            message: message.into(),
        }
    }
}
