use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by the whitening kernels and the layer itself.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Non-finite data was fed to an operation that requires finite input.
    InvalidInput(String),
    /// Operand dimensions do not line up.
    ShapeError(String),
    /// An iterative kernel failed to converge or an SPD precondition was
    /// violated (non-positive eigenvalue, diverging Newton iterate, ...).
    NumericalFailure(String),
    /// Invalid layer configuration (group size, method set, ...).
    ConfigError(String),
    /// Layer state does not match the data or cache it is used with.
    StateError(String),
    /// The eigendecomposition backward pass is undefined: the smallest
    /// eigenvalue gap fell below the threshold, so the K-matrix entries
    /// 1/(sigma_i - sigma_j) blow up. Retry on the Newton path.
    DegenerateSpectrum { gap: f64, threshold: f64 },
    /// A finite-difference probe evaluated to a non-finite value.
    OracleFailure(String),
    /// The demo training loop produced a non-finite loss.
    TrainingDiverged { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::ShapeError(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NumericalFailure(msg) => write!(f, "numerical failure: {msg}"),
            Error::ConfigError(msg) => write!(f, "config error: {msg}"),
            Error::StateError(msg) => write!(f, "state error: {msg}"),
            Error::DegenerateSpectrum { gap, threshold } => write!(
                f,
                "degenerate spectrum: eigenvalue gap {gap:e} below threshold {threshold:e}"
            ),
            Error::OracleFailure(msg) => write!(f, "oracle failure: {msg}"),
            Error::TrainingDiverged { step } => {
                write!(f, "training diverged: non-finite loss at step {step}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
