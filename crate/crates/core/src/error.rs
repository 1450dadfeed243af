use alloc::string::String;

/// Errors raised across the detector core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An operand disagrees with what an operation expects along one axis.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    /// A call violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {breakdown}")]
    Diverged { step: u64, breakdown: String },
    /// Text input could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Error {
    Error::Dimension {
        op,
        axis,
        expected,
        found,
    }
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(::alloc::format!($($arg)*))
    };
}
pub(crate) use contract;
