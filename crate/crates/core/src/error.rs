use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A statistic needs at least two rows.
    DegenerateBatch { rows: usize },
    /// Non-finite values or out-of-domain arguments.
    InvalidInput(String),
    /// A symmetric eigenvalue was not strictly positive.
    NotPositiveDefinite { eigenvalue: f64 },
    /// Shapes, labels or other caller-side preconditions did not hold.
    Contract(String),
    /// Eval-mode whitening requested before any training batch was seen.
    UninitializedStats,
    /// Unusable configuration (impossible split, too few identities, ...).
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateBatch { rows } => {
                write!(f, "degenerate batch: {rows} row(s), need at least 2")
            }
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::NotPositiveDefinite { eigenvalue } => {
                write!(f, "matrix is not positive definite (eigenvalue {eigenvalue:e})")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::UninitializedStats => {
                f.write_str("whitening running statistics are uninitialized; train first")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(alloc::format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
