use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unsupported constellation order {0}: expected one of 4, 16, 64, 256")]
    UnsupportedOrder(usize),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("carrier phase recovery configuration required for variant {0}")]
    MissingCprConfig(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
