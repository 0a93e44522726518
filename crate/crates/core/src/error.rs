use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("density is not positive (min {min:.3e})")]
    NonPositiveDensity { min: f64 },

    #[error("exponent overflow in {context} (max exponent {max_exponent:.3e})")]
    Overflow { context: String, max_exponent: f64 },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("state blew up at t = {time:.6}: norm {norm:.3e}")]
    BlowUp { time: f64, norm: f64 },

    #[error("operator cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: &str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.to_string(),
            expected,
            found,
        }
    }
}
