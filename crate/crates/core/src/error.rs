use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerics core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: entry {index} = {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("index error in {op}: {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by non-finite values or out-of-domain inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Domain { .. } | Error::Numeric(_))
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
