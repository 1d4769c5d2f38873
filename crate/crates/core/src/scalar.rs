//! Floating-point scalar abstraction shared by the embedding and network code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable for document vectors and network parameters: `f32` or `f64`.
///
/// `Display` must print the shortest representation that parses back to the
/// same value through `FromStr`; the model file format relies on it.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Display
    + Debug
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant, panicking only if the type cannot hold it at all.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    #[test]
    fn display_round_trips() {
        for v in [0.1f64, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            let s = v.to_string();
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        for v in [0.1f32, 1.0 / 3.0, -7.3e-30] {
            let s = v.to_string();
            assert_eq!(s.parse::<f32>().unwrap().to_bits(), v.to_bits());
        }
    }
}
