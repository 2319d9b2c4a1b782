use alloc::string::String;

/// Errors raised by the numerics core and everything built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    /// Raised by an observer (metrics writer, checkpoint sink) outside the core.
    #[error("{0}")]
    External(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}

impl Error {
    /// True for failures caused by NaN/Inf during a forward pass.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
