use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// The variants are grouped so that a front end can map them onto exit
/// codes: [`Error::Validation`] is a user error, [`Error::Assertion`] a
/// failed check, everything else a numerical failure.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("non-finite evaluation of {what} at eta = {eta}")]
    Domain { what: &'static str, eta: f64 },

    #[error("{stage}: quadrature did not reach tolerance {requested:e} (achieved {achieved:e})")]
    Integration {
        stage: &'static str,
        requested: f64,
        achieved: f64,
    },

    #[error("decomposition: {message} (witness s = {witness})")]
    Decomposition { message: String, witness: f64 },

    #[error("divergence at step {step}: max |phi| = {max_abs:e}")]
    Divergence { step: usize, max_abs: f64 },

    #[error("check failed: {0}")]
    Assertion(String),
}

impl Error {
    pub fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
