use thiserror::Error;

/// Errors raised by the numerical core and the imaging pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, divisibility, range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for returning a contract violation.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
