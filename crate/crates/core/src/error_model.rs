//! Quantization error, INT error ceilings and the MXFP4/MXFP6 outlier
//! thresholds.
//!
//! Formulas are generic over [`Scalar`], so the same code evaluates in `f32`,
//! `f64` or exactly over [`crate::Rational`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mx::format::{encode_element, MxFormat};
use crate::mx::{block_scale, MxBlock};
use crate::scalar::{Real, Scalar};
use crate::tensor::DenseTensor;

/// Width of the high-precision reference integer format.
pub const DEFAULT_HIGH_PRECISION_BITS: u32 = 8;

/// Error of one element, `error = gamma * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantError {
    /// `|round(x/s) - x/s|`, in units of the block scale.
    pub gamma: f64,
    pub scale: f64,
    pub error: f64,
}

/// Decompose the rounding error of `x` under `block`'s scale.
pub fn quant_error(x: f32, block: &MxBlock, fmt: MxFormat) -> QuantError {
    let scale = block.scale.value();
    let scaled = x as f64 / scale;
    let code = encode_element(x, block.scale, fmt);
    let gamma = (fmt.value(code) - scaled).abs();
    QuantError {
        gamma,
        scale,
        error: gamma * scale,
    }
}

fn require_positive<T: Scalar>(tensor_max: T) -> Result<()> {
    if tensor_max.partial_cmp(&T::zero()) != Some(Ordering::Greater) {
        return Err(Error::domain(format!("tensor max must be positive, got {tensor_max:?}")));
    }
    Ok(())
}

/// Worst-case error of symmetric `n`-bit integer quantization,
/// `max / (2^n - 2)`.
pub fn int_error_bound<T: Scalar>(tensor_max: T, n_bits: u32) -> Result<T> {
    require_positive(tensor_max)?;
    if !(2..=62).contains(&n_bits) {
        return Err(Error::domain(format!("integer width {n_bits} outside 2..=62")));
    }
    Ok(tensor_max / T::from_ratio((1i64 << n_bits) - 2, 1))
}

/// The same bound written in terms of the integer range, `max / (2 q_max)`.
pub fn int_error_bound_qmax<T: Scalar>(tensor_max: T, q_max: T) -> Result<T> {
    require_positive(tensor_max)?;
    if q_max.partial_cmp(&T::one()).is_none_or(Ordering::is_lt) {
        return Err(Error::domain(format!("q_max must be at least 1, got {q_max:?}")));
    }
    Ok(tensor_max / (q_max + q_max))
}

/// Per-channel (per-column) symmetric integer fake quantization:
/// `s = max|channel| / q_max`, round half to even, clamp to `[-q_max, q_max]`,
/// multiply back. All-zero channels pass through.
pub fn int_fake_quant<T: Real>(t: &DenseTensor<T>, q_max: T) -> Result<DenseTensor<T>> {
    if q_max.partial_cmp(&T::one()).is_none_or(Ordering::is_lt) {
        return Err(Error::domain(format!("q_max must be at least 1, got {q_max:?}")));
    }
    let mut out = t.clone();
    for c in 0..t.cols() {
        let max = (0..t.rows()).map(|r| t.get(r, c).abs()).fold(T::zero(), T::max);
        if max == T::zero() {
            continue;
        }
        let s = max / q_max;
        for r in 0..t.rows() {
            let q = (t.get(r, c) / s).round_half_even().max(-q_max).min(q_max);
            out.set(r, c, q * s);
        }
    }
    Ok(out)
}

/// Channel precision groups, in ascending precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    Fp4,
    Fp6,
    Fp8,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Fp4, Precision::Fp6, Precision::Fp8];

    pub fn bits(self) -> u32 {
        match self {
            Precision::Fp4 => 4,
            Precision::Fp6 => 6,
            Precision::Fp8 => 8,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Precision::Fp4 => "fp4",
            Precision::Fp6 => "fp6",
            Precision::Fp8 => "fp8",
        }
    }
}

/// Outlier thresholds for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet<T = f64> {
    pub tensor_max: T,
    pub t4: T,
    pub t6: T,
    /// Worst-case error of the high-precision integer reference,
    /// `tensor_max / 254` for 8 bits.
    pub int8_ceiling: T,
}

impl<T: Scalar> ThresholdSet<T> {
    /// Lowest precision whose threshold admits a channel maximum.
    pub fn classify(&self, channel_max: T) -> Precision {
        if channel_max <= self.t4 {
            Precision::Fp4
        } else if channel_max <= self.t6 {
            Precision::Fp6
        } else {
            Precision::Fp8
        }
    }

    /// Threshold a group's channel maxima must stay under; FP8 has none.
    pub fn limit(&self, p: Precision) -> Option<T> {
        match p {
            Precision::Fp4 => Some(self.t4),
            Precision::Fp6 => Some(self.t6),
            Precision::Fp8 => None,
        }
    }
}

/// `T(n) = 2^(b+n-1) / q_max * ceiling`: the largest magnitude for which the
/// approximate `n`-bit error stays under the integer ceiling.
pub fn threshold<T: Scalar>(ceiling: T, fmt: MxFormat) -> T {
    let q_max = fmt.q_max();
    let exp = fmt.bias() + fmt.element_bits() as i32 - 1;
    T::pow2(exp) * ceiling * T::from_ratio(*q_max.denom(), *q_max.numer())
}

/// Thresholds against an 8-bit integer ceiling: E2M1 for FP4, E3M2 for FP6.
pub fn thresholds<T: Scalar>(tensor_max: T) -> Result<ThresholdSet<T>> {
    thresholds_with_bits(tensor_max, DEFAULT_HIGH_PRECISION_BITS)
}

pub fn thresholds_with_bits<T: Scalar>(tensor_max: T, hp_bits: u32) -> Result<ThresholdSet<T>> {
    let ceiling = int_error_bound(tensor_max, hp_bits)?;
    Ok(ThresholdSet {
        tensor_max,
        t4: threshold(ceiling, MxFormat::E2M1),
        t6: threshold(ceiling, MxFormat::E3M2),
        int8_ceiling: ceiling,
    })
}

/// Approximate per-element error bound, `q_max / 2^(n-1) * max / 2^b`
/// (rounding error taken as `q_max / 2^(n-1)`).
pub fn fp_error_bound<T: Scalar>(tensor_max: T, fmt: MxFormat) -> Result<T> {
    require_positive(tensor_max)?;
    let q_max = fmt.q_max();
    let gamma = T::from_ratio(*q_max.numer(), *q_max.denom()) / T::pow2(fmt.element_bits() as i32 - 1);
    Ok(gamma * tensor_max / T::pow2(fmt.bias()))
}

/// Exact worst-case element error for any block whose largest magnitude is
/// `block_max`: the block scale from `block_scale`, times the largest
/// distance from a point of `[0, block_max / s]` to its nearest code.
pub fn exact_error_bound(block_max: f32, fmt: MxFormat) -> Result<f64> {
    require_positive(block_max)?;
    let scale = block_scale(&[block_max], fmt).value();
    let reach = block_max as f64 / scale;
    let points = fmt.code_points();
    let mut worst = 0.0f64;
    for pair in points.windows(2) {
        let (lo, hi) = (pair[0].1, pair[1].1);
        if lo >= reach {
            break;
        }
        worst = worst.max((reach - lo).min((hi - lo) / 2.0));
    }
    let top = fmt.q_max_f64();
    if reach > top {
        worst = worst.max(reach - top);
    }
    Ok(worst * scale)
}
