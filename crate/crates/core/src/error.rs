use thiserror::Error;

/// Errors raised by the core library.
///
/// The variants map onto the failure classes the harness distinguishes:
/// shape and configuration problems are caller errors, protocol and
/// invariant violations indicate a broken run.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("malformed trace: {0}")]
    Format(String),
}

impl Error {
    /// True for errors caused by the inputs rather than by a run going wrong.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
