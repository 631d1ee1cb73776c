//! Floating-point element type shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A real scalar: `f32` or `f64`.
///
/// Everything in the crate is written against this trait. The default
/// aliases at the crate root pin it to `f64`, which the exactness tests
/// require.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into checkpoint headers.
    const DTYPE: &'static str;

    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;

    /// Widening conversion used for serialization and metrics.
    fn as_f64(self) -> f64;

    fn next_up(self) -> Self;

    fn next_down(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn next_up(self) -> Self {
        f64::next_up(self)
    }

    #[inline]
    fn next_down(self) -> Self {
        f64::next_down(self)
    }

    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn next_up(self) -> Self {
        f32::next_up(self)
    }

    #[inline]
    fn next_down(self) -> Self {
        f32::next_down(self)
    }

    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
