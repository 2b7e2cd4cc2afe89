//! Scalar abstraction shared by the error model, calibration and the dense
//! reference products.
//!
//! The MX encode/decode path is pinned to `f32` for bit-exactness. Everything
//! that is a formula (thresholds, error bounds, dense references) is generic
//! so it can be evaluated in `f32`, `f64` or exactly in [`Rational`].

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num};

/// Exact rational scalar used for closed-form checks.
pub type Rational = Ratio<i64>;

/// A field-like scalar: anything the closed-form formulas can be evaluated in.
pub trait Scalar: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {
    /// `numer / denom` in this scalar type.
    fn from_ratio(numer: i64, denom: i64) -> Self;

    /// `2^exp`. Exact for rationals and for floats inside their normal range.
    fn pow2(exp: i32) -> Self {
        let two = Self::one() + Self::one();
        let mut acc = Self::one();
        for _ in 0..exp.unsigned_abs() {
            acc = acc * two;
        }
        if exp < 0 {
            Self::one() / acc
        } else {
            acc
        }
    }

    fn from_usize(n: usize) -> Self {
        Self::from_ratio(n as i64, 1)
    }

    fn abs_val(self) -> Self {
        if self < Self::zero() {
            Self::zero() - self
        } else {
            self
        }
    }

    /// Lossy conversion for reporting.
    fn to_f64_lossy(self) -> f64;

    /// Rejects NaN and infinities; always true for exact scalars.
    fn is_finite_val(self) -> bool {
        true
    }
}

/// Floating-point scalars (`f32`, `f64`).
pub trait Real: Scalar + Float + FromPrimitive {
    /// Round to nearest integer, ties to even.
    fn round_half_even(self) -> Self {
        let r = self.round();
        let half = Self::one() / (Self::one() + Self::one());
        if (r - self).abs() == half {
            let two = Self::one() + Self::one();
            two * (self / two).round()
        } else {
            r
        }
    }
}

impl Scalar for f32 {
    fn from_ratio(numer: i64, denom: i64) -> Self {
        (numer as f64 / denom as f64) as f32
    }
    fn pow2(exp: i32) -> Self {
        f32::powi(2.0, exp)
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    fn from_ratio(numer: i64, denom: i64) -> Self {
        numer as f64 / denom as f64
    }
    fn pow2(exp: i32) -> Self {
        f64::powi(2.0, exp)
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Rational {
    fn from_ratio(numer: i64, denom: i64) -> Self {
        Ratio::new(numer, denom)
    }
    fn pow2(exp: i32) -> Self {
        assert!(exp.unsigned_abs() < 63, "2^{exp} does not fit a 64-bit rational");
        let p = Ratio::from_integer(1i64 << exp.unsigned_abs());
        if exp < 0 {
            p.recip()
        } else {
            p
        }
    }
    fn to_f64_lossy(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Exact `2^exp` as an `f64` built from its bit pattern (normal range only).
pub(crate) fn pow2_f64(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}
