use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

/// Floating-point element type of a [`Tensor`](crate::Tensor).
///
/// Training runs at `f32`; gradient verification uses `f64`.
pub trait Real:
    Float
    + FloatConst
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short name used in checkpoints and reports (`"f32"` / `"f64"`).
    const NAME: &'static str;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting an `f64` literal into `T`.
#[inline]
pub(crate) fn c<T: Real>(x: f64) -> T {
    T::of_f64(x)
}
