use std::path::PathBuf;

/// Failures while reading an on-disk trial archive.
#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("trial {trial}: blob {path} is missing")]
    MissingBlob { trial: usize, path: PathBuf },
    #[error("trial {trial}: blob {path} has wrong magic")]
    BadMagic { trial: usize, path: PathBuf },
    #[error("trial {trial}: blob {path} is truncated ({found} of {expected} bytes)")]
    Truncated {
        trial: usize,
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("trial {trial}: blob {path} holds {found} values, manifest declares {channels}x{samples}")]
    ShapeMismatch {
        trial: usize,
        path: PathBuf,
        channels: usize,
        samples: usize,
        found: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data integrity error: {0}")]
    Integrity(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 configuration, 3 data integrity, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Shape(_) | Error::State(_) => 2,
            Error::Numerical(_) => 4,
            Error::Integrity(_)
            | Error::Io { .. }
            | Error::Serialize(_)
            | Error::Parse(_)
            | Error::Stage { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
