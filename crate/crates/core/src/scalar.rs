//! Scalar abstraction shared by every numeric module.
//!
//! Training, merging and Gaussian replay are written once against [`Scalar`]
//! and instantiated for `f64` (the default used by the pipeline and the
//! diagnostics) or `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type usable by the toolkit: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in checkpoints and error messages.
    const NAME: &'static str;

    /// Lossless for `f64`, round-to-nearest for `f32`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    /// Widening conversion; exact for both implementations.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widen_narrow_round_trip_is_exact() {
        for x in [0.1f32, -3.5e-20, f32::MAX, f32::MIN_POSITIVE] {
            assert_eq!(f32::of(x.as_f64()).to_bits(), x.to_bits());
        }
        assert_eq!(f64::of(0.1).as_f64(), 0.1);
    }
}
