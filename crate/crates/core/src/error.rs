use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument is outside its mathematical domain (e.g. hazard at t = 1).
    Domain(String),
    /// A caller violated an operation contract (e.g. substituting a clean position).
    Contract(String),
    /// Invalid configuration (divisibility, schema, architecture mismatch).
    Config(String),
    /// An enumerable-space cap was exceeded.
    Size(String),
    /// Conditioning on an event of probability zero.
    UnreachableState(String),
    /// A KL divergence is infinite; carries the offending state.
    InfiniteKl(String),
    /// Training produced a non-finite loss; carries a diagnostic dump.
    DivergedLoss(String),
    /// Internal arithmetic invariant failed (should not happen).
    Internal(String),
    /// Checkpoint or artifact I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Size(m) => write!(f, "size error: {m}"),
            Error::UnreachableState(m) => write!(f, "unreachable state: {m}"),
            Error::InfiniteKl(m) => write!(f, "infinite KL: {m}"),
            Error::DivergedLoss(m) => write!(f, "diverged loss: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
