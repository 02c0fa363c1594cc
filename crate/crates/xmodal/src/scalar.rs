use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the dense kernels are generic over. Blanket-implemented for
/// `f32` and `f64`; the pipeline instantiates everything at [`crate::Real`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 -> scalar conversion")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize -> scalar conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}
