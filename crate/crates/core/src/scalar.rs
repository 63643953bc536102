use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar the numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`. The analysis pipeline itself always runs
/// in `f64`; `f32` is supported for callers that want the kernels on their own.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, saturating to infinity when out of range.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(|| {
            if value.is_sign_negative() {
                Self::neg_infinity()
            } else {
                Self::infinity()
            }
        })
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::infinity)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `+1` for positive values, `-1` for negative values and `0` for zero.
    fn sign_or_zero(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else if self < Self::zero() {
            -Self::one()
        } else {
            Self::zero()
        }
    }

    /// `1` when `flag` is set, else `0`, without branching.
    fn from_flag(flag: bool) -> Self;

    /// `|self|` carrying the sign of `sign`, without branching.
    fn with_sign_of(self, sign: Self) -> Self;
}

macro_rules! impl_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            #[inline(always)]
            fn from_flag(flag: bool) -> Self {
                flag as u8 as $t
            }

            #[inline(always)]
            fn with_sign_of(self, sign: Self) -> Self {
                <$t>::copysign(self, sign)
            }
        }
    )*};
}

impl_scalar!(f32, f64);
