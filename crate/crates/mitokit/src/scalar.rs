//! Scalar abstraction for the numeric kernels.
//!
//! Everything numeric (losses, autodiff, models, metrics) is generic over
//! [`Scalar`]. In practice `f32` is used for training speed and `f64` for
//! tight-tolerance verification; the crate root exports concrete aliases.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 not representable")
    }

    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize not representable")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("value not representable as f64")
    }

    fn half() -> Self {
        Self::of_f64(0.5)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
