use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar used throughout the solvers (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).unwrap()
    }

    #[inline]
    fn of_i64(n: i64) -> Self {
        Self::from_i64(n).unwrap()
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// `|x|^e` with the convention `0^0 = 1`.
    #[inline]
    fn abs_pow(self, e: Self) -> Self {
        if e == Self::zero() {
            Self::one()
        } else {
            self.abs().powf(e)
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}
