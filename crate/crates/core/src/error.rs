use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A vector did not have the length its owner declared.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// Invalid configuration or parameter value.
    Config(String),
    /// An input that must be non-empty was empty.
    Empty(&'static str),
    /// Value iteration did not reach the requested tolerance.
    NonConvergence { iterations: usize, residual: f64 },
    /// Training loss blew up or parameters became non-finite.
    Divergence { step: usize, loss: f64 },
    /// A special-function evaluation did not converge.
    Numeric(&'static str),
    /// Conditional-coverage law undefined because `floor((n + 1) alpha) = 0`.
    CalibrationTooSmall { n: usize, alpha: f64 },
    /// Error raised while training one ensemble member.
    Member { index: usize, source: Box<Error> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected length {expected}, found {found}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Empty(what) => write!(f, "{what} must not be empty"),
            Error::NonConvergence {
                iterations,
                residual,
            } => write!(
                f,
                "value iteration did not converge after {iterations} sweeps (residual {residual:e})"
            ),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss:e})")
            }
            Error::Numeric(what) => write!(f, "numerical routine failed: {what}"),
            Error::CalibrationTooSmall { n, alpha } => write!(
                f,
                "floor((n + 1) * alpha) = 0 for n = {n}, alpha = {alpha}; increase n or alpha"
            ),
            Error::Member { index, source } => {
                write!(f, "ensemble member {index}: {source}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
