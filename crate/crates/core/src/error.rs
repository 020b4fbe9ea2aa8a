use thiserror::Error;

/// Errors raised by the planning library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inconsistent geometry, raster or model parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// A call argument violates the operation's precondition.
    #[error("argument error: {0}")]
    Argument(String),
    /// Two grids or stacks that must be aligned are not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A structure is missing or empty.
    #[error("structure error: {0}")]
    Structure(String),
    /// Operation called out of order (e.g. OAR error before references are frozen).
    #[error("state error: {0}")]
    State(String),
    /// A data-augmentation draw produced an unusable case.
    #[error("augmentation rejected: {0}")]
    Augmentation(String),
    /// NaN or infinite values where finite ones are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
