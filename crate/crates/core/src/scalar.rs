use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type the simulator and oracles are generic over.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Rounds to the nearest IEEE half-precision value, keeping the result in `Self`.
    fn round_to_half(self) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    fn round_to_half(self) -> Self {
        half::f16::from_f32(self).to_f32()
    }
}

impl Scalar for f64 {
    fn round_to_half(self) -> Self {
        half::f16::from_f64(self).to_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounding_is_nearest() {
        assert_eq!(1.0f32.round_to_half(), 1.0);
        // 1 + 2^-11 sits exactly between 1 and 1 + 2^-10; ties go to even.
        assert_eq!((1.0f32 + 2f32.powi(-11)).round_to_half(), 1.0);
        assert_eq!((1.0f64 + 3.0 * 2f64.powi(-12)).round_to_half(), 1.0 + 2f64.powi(-10));
        assert_eq!(f32::NEG_INFINITY.round_to_half(), f32::NEG_INFINITY);
    }
}
