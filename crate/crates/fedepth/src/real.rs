//! Scalar abstraction so every numeric path runs at either precision:
//! `f32` for training, `f64` for oracle and gradient tests.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::ScalarOperand;
use num_traits::Float;

/// Floating-point element type for tensors, geometry, and losses.
pub trait Real:
    Float
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum<Self>
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Shorthand for converting an `f64` literal into `Self`.
    fn c(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite literal converts")
    }

    /// Widens to `f64` for reporting and cross-precision comparisons.
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("real widens to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
