//! Crate-wide error type and the process exit-code contract.

use crate::instrument::InstrumentError;
use crate::nonlin::NonlinError;
use crate::polarization::PolError;
use crate::sde::SdeError;
use crate::session::SessionError;
use crate::stability::StabilityError;
use crate::uncertainty::UncertaintyError;

/// Exit codes used by the command-line tool: 0 success, 2 usage,
/// 3 data error, 4 numerical error (fit failure, domain violation).
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Nonlin(#[from] NonlinError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Pol(#[from] PolError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Maps every error to the documented exit codes: schema/data problems
    /// exit 3, numerical problems (fits, domain violations) exit 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Uncertainty(_) => EXIT_NUMERICAL,
            Error::Nonlin(e) => e.exit_code(),
            Error::Instrument(e) => e.exit_code(),
            Error::Sde(e) => e.exit_code(),
            Error::Pol(_) => EXIT_DATA,
            Error::Stability(_) => EXIT_DATA,
            Error::Session(_) => EXIT_DATA,
            Error::Io(_) => EXIT_DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
