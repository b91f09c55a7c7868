//! Element trait shared by f32 (training) and f64 (gradient-check) kernels.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + serde::Serialize
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    /// Faster, slightly approximate exp for hot loops; exact for f64 so the
    /// gradient-check path keeps full precision.
    fn exp_fast(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// Fast tanh companion to [`Scalar::exp_fast`].
    fn tanh_fast(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

/// Branch-free exp via a 2^x bit decomposition and a quintic on the
/// fractional part; relative error stays near 1e-4, plenty for the
/// f32 training path (the f64 gradient-check path uses libm).
#[inline]
pub fn exp_fast_f32(x: f32) -> f32 {
    let t = (x * std::f32::consts::LOG2_E).clamp(-126.0, 126.0);
    let i = t.floor();
    let f = t - i;
    let p = 1.0
        + f * (std::f32::consts::LN_2
            + f * (0.240_226_51
                + f * (0.055_504_11 + f * (0.009_618_129 + f * 0.001_333_355_8))));
    f32::from_bits(((i as i32 + 127) as u32) << 23) * p
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn exp_fast(self) -> Self {
                ScalarFast::exp_fast_impl(self)
            }
            #[inline]
            fn tanh_fast(self) -> Self {
                ScalarFast::tanh_fast_impl(self)
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

impl ScalarFast for f32 {
    #[inline]
    fn exp_fast_impl(self) -> Self {
        exp_fast_f32(self)
    }
    #[inline]
    fn tanh_fast_impl(self) -> Self {
        if self > 9.0 {
            return 1.0;
        }
        if self < -9.0 {
            return -1.0;
        }
        let e = exp_fast_f32(2.0 * self);
        (e - 1.0) / (e + 1.0)
    }
}

impl ScalarFast for f64 {
    #[inline]
    fn exp_fast_impl(self) -> Self {
        self.exp()
    }
    #[inline]
    fn tanh_fast_impl(self) -> Self {
        self.tanh()
    }
}

trait ScalarFast {
    fn exp_fast_impl(self) -> Self;
    fn tanh_fast_impl(self) -> Self;
}
