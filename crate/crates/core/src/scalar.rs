//! Scalar abstraction for the numeric kernels.
//!
//! The sparse Cholesky, the simplex optimizer, the covariance-factor
//! template and the truncated polynomial basis are written against
//! [`Scalar`] so they can run in `f32` or `f64`. The statistical layers
//! above them (estimation, conditional AIC, stepwise search) are pinned to
//! `f64` through the aliases in the crate root.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Debug
        + Default
        + Send
        + Sync
        + 'static
{
}
