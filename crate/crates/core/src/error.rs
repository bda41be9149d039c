//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by every layer of the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("generator count mismatch: {0} vs {1}")]
    MismatchedGeneratorCount(usize, usize),
    #[error("expected an even element: {0}")]
    NotEven(String),
    #[error("element has zero body: {0}")]
    ZeroBody(String),
    #[error("parity error: {0}")]
    Parity(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("body mismatch: {0}")]
    BodyMismatch(String),
    #[error("not invertible: {0}")]
    NotInvertible(String),
    #[error("odd-odd block is singular: {0}")]
    SingularV(String),
    #[error("sign of the body determinant is not constant on the region")]
    SignAmbiguous,
    #[error("operator is not a derivation: {0}")]
    NotDerivation(String),
    #[error("no adapted coordinates: {0}")]
    NoAdaptedCoordinates(String),
    #[error("integrand singular at a quadrature node: {0}")]
    NodeSingularity(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error at {line}:{col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{context}: {source}")]
    Scenario { context: String, source: Box<Error> },
}

impl Error {
    /// Wraps the error with a description of where it arose.
    pub fn context(self, context: impl Into<String>) -> Error {
        match self {
            e @ Error::Parse { .. } => e,
            other => Error::Scenario { context: context.into(), source: Box::new(other) },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
