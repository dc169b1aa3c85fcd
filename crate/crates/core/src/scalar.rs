use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

/// Floating-point scalar type usable throughout the crate.
///
/// The bound collects what the numerics need: IEEE float behaviour
/// ([`Float`]), in-place arithmetic, ndarray's linear-algebra and broadcasting
/// operand traits, summability, and thread-safety for parallel evaluation.
/// Implemented for `f32` and `f64`; production code uses `f64` via
/// [`crate::Real`].
pub trait Scalar:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Conversion from `f64`, used for literals and tolerances. Lossy for
    /// `f32`.
    fn from_f64(v: f64) -> Self;

    /// Widening conversion to `f64` for reporting and serialization.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `S::from_f64` used heavily by formula code.
#[inline]
pub(crate) fn c<S: Scalar>(v: f64) -> S {
    S::from_f64(v)
}
