//! Scalar abstractions shared by the numerical modules.
//!
//! Similarity and calibration code is written against [`Scalar`] (binary
//! floating point, `f32` or `f64`). Area-under-curve reductions only need
//! exact field arithmetic and absolute values, so they are written against
//! [`AucScalar`], which is also satisfied by arbitrary-precision rationals.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, Signed, ToPrimitive};

/// Floating point scalar: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Round an `f64` to this type (nearest, ties to even).
    fn from_f64_rounded(v: f64) -> Self;

    /// Total order used wherever scores are sorted or selected.
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_rounded(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        f32::total_cmp(self, other)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_rounded(v: f64) -> Self {
        v
    }

    #[inline]
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        f64::total_cmp(self, other)
    }
}

/// Ordered field with absolute value, used for trapezoid integration and L1
/// marginals. Implemented for `f32`, `f64` and `BigRational`.
pub trait AucScalar: Clone + Signed + PartialOrd + FromPrimitive + ToPrimitive + Debug {
    /// Exact conversion where the type allows it (rationals), rounding otherwise.
    fn from_f64_exact(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite value")
    }

    /// Nearest `f64`.
    fn to_f64_nearest(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

impl<T> AucScalar for T where T: Clone + Signed + PartialOrd + FromPrimitive + ToPrimitive + Debug {}
