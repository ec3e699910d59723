use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the numerical core.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A documented precondition of an operation was violated.
    Contract(String),
    /// Two operands (or an operand and a geometry) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A NaN or infinity appeared where only finite values are allowed.
    NonFinite(String),
    /// Training loss became non-finite.
    Diverged {
        stage: u8,
        iteration: usize,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "shape mismatch in {op}: expected {expected:?}, got {got:?}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Diverged {
                stage,
                iteration,
                loss,
            } => write!(
                f,
                "stage {stage} diverged at iteration {iteration} (loss = {loss})"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
