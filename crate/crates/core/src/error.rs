use thiserror::Error;

/// Errors produced by the simulation and estimator stack.
///
/// The CLI maps these onto distinct exit codes: `Config` -> 2,
/// `OutOfRegime` -> 3, `DegenerateScan` -> 4, everything else -> 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A first-order correction was asked to operate outside its validity
    /// range (e.g. rate * dead_time >= 1).
    #[error("out of regime: {0}")]
    OutOfRegime(String),

    /// The visibility fit could not be solved (too few distinct angles,
    /// singular normal equations).
    #[error("degenerate scan: {0}")]
    DegenerateScan(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
