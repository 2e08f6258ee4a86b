use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

/// Floating-point width of a [`Scalar`] type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Real scalar every kernel in this crate is parameterized over.
///
/// `f64` is the reference precision (gradient checks and the acceptance
/// bounds assume it); `f32` is the cheap runtime default.
pub trait Scalar:
    Float + num_traits::NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
