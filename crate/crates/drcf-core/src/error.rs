//! Error type shared across the crate.
//!
//! Three kinds, matching the failure surfaces of the pipeline: bad
//! configuration or arguments, out-of-contract data, and numerical
//! failures that survive the fallback policies.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid configuration or arguments: bad basis spec, split-tag
    /// breach, target outside the domain, malformed experiment grid.
    Validation(String),
    /// Data violating preconditions: NaN/inf values, non-binary
    /// treatment where one is required, empty splits.
    Data(String),
    /// Numerical failure: singular Gram beyond the drop/ridge policy,
    /// non-convergent quadrature, rank-deficient whitening reference.
    Numeric(String),
}

impl Error {
    pub fn message(&self) -> &str {
        match self {
            Error::Validation(m) | Error::Data(m) | Error::Numeric(m) => m,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
