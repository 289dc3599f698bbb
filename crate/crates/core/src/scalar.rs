//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the tensor engine, the optimizer and the
/// perturbation engine: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// The adjacent representable value in the direction of `target`.
    fn step_toward(self, target: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn step_toward(self, target: Self) -> Self {
                if self.is_nan() || target.is_nan() || self == target {
                    return self;
                }
                if self == 0.0 {
                    return <$t>::from_bits(1).copysign(target);
                }
                let bits = self.to_bits();
                // moving away from zero increments the magnitude bits
                if (target > self) == (self > 0.0) {
                    <$t>::from_bits(bits + 1)
                } else {
                    <$t>::from_bits(bits - 1)
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[cfg(test)]
mod tests {
    use super::Scalar;

    #[test]
    fn step_toward_moves_one_ulp() {
        assert_eq!(1.0f64.step_toward(2.0), 1.0 + f64::EPSILON);
        assert_eq!(1.0f64.step_toward(0.0), 1.0 - f64::EPSILON / 2.0);
        assert_eq!((-1.0f64).step_toward(0.0), -1.0 + f64::EPSILON / 2.0);
        assert_eq!((-1.0f64).step_toward(-2.0), -1.0 - f64::EPSILON);
        assert_eq!(0.0f64.step_toward(-1.0), -f64::from_bits(1));
        assert_eq!(3.0f32.step_toward(3.0), 3.0);
    }
}
