use thiserror::Error;

use crate::market::MarketError;
use crate::pipeline::ConfigError;
use crate::pool::PoolError;
use crate::select::SelectError;
use crate::signals::SignalError;
use crate::standardize::StandardizeError;
use crate::tune::TuneError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Standardize(#[from] StandardizeError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown example id {0:?}")]
    UnknownId(String),
}

impl Error {
    /// True for failures caused by unreadable input or a malformed
    /// configuration, as opposed to data that violates a model invariant.
    pub fn is_io_or_config(&self) -> bool {
        match self {
            Error::Pool(e) => e.is_io_or_parse(),
            Error::Config(_) | Error::UnknownId(_) => true,
            Error::Tune(TuneError::Io { .. } | TuneError::Parse { .. }) => true,
            _ => false,
        }
    }
}
