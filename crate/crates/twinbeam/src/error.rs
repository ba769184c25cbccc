use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] twinbeam_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format { line, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => e.kind(),
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Usage(_) => "usage",
        }
    }

    /// Process exit status: 2 usage, 3 validation, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use twinbeam_core::Error as E;
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Core(E::Validation(_) | E::Dimension(_) | E::ClassicalRegime { .. } | E::Physicality(_)) => 3,
            Error::Core(_) => 4,
        }
    }
}
