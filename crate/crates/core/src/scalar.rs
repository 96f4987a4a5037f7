//! Floating-point scalar abstraction.
//!
//! Oracles and gradient checks run at 64 bits; training may run at 32 bits
//! for speed. Everything generic over [`Scalar`] works identically for both.

use core::fmt::{Debug, Display};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar usable by the differentiation kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Short dtype tag used in diagnostics.
    const DTYPE: &'static str;

    /// Converts from `f64`, rounding if necessary.
    #[inline]
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    /// Widens to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
