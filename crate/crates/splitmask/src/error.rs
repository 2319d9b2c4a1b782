use std::path::PathBuf;

/// Failures surfaced by the command line, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] splitmask_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 2 configuration, 3 data, 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(splitmask_core::Error::Config(_)) => 2,
            Error::Data(_) | Error::Core(splitmask_core::Error::Capacity(_)) => 3,
            Error::Numerical(_) | Error::Core(splitmask_core::Error::NonFinite { .. }) => 4,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            4 => "numerical",
            _ => "internal",
        }
    }

    /// Single-line, machine-readable description.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error kind={} code={} message={:?}", self.kind(), self.exit_code(), msg)
    }
}

/// Converts an error from the core into one reported as a data error.
pub(crate) fn data_err(e: splitmask_core::Error) -> Error {
    match e {
        splitmask_core::Error::NonFinite { .. } | splitmask_core::Error::Config(_) => Error::Core(e),
        other => Error::Data(other.to_string()),
    }
}
