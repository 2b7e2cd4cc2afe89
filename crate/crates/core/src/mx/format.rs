//! MX element formats, E8M0 shared scales and element codes.
//!
//! Element codes use the OCP sign/exponent/mantissa layout. The element
//! exponent bias of every format coincides with the bias `b` that enters the
//! block scale `2^(floor(log2 max|X|) - b)`.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{pow2_f64, Rational};

/// Elements sharing one scale.
pub const BLOCK_SIZE: usize = 32;
/// Bits of an E8M0 scale.
pub const SCALE_BITS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FormatName {
    E2M1,
    E3M2,
    E2M3,
    E4M3,
    E5M2,
}

/// How the all-ones exponent field is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Specials {
    /// Every code is a finite number (FP4, FP6).
    None,
    /// Only `S.1111.111` is NaN (E4M3).
    NanOnly,
    /// IEEE-style: all-ones exponent is Inf (mantissa 0) or NaN (E5M2).
    Ieee,
}

/// Static descriptor of one MX element format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MxFormat {
    name: FormatName,
    exponent_bits: u32,
    mantissa_bits: u32,
    bias: i32,
    specials: Specials,
}

impl MxFormat {
    pub const E2M1: MxFormat = MxFormat::new(FormatName::E2M1, 2, 1, 1, Specials::None);
    pub const E3M2: MxFormat = MxFormat::new(FormatName::E3M2, 3, 2, 3, Specials::None);
    pub const E2M3: MxFormat = MxFormat::new(FormatName::E2M3, 2, 3, 1, Specials::None);
    pub const E4M3: MxFormat = MxFormat::new(FormatName::E4M3, 4, 3, 7, Specials::NanOnly);
    pub const E5M2: MxFormat = MxFormat::new(FormatName::E5M2, 5, 2, 15, Specials::Ieee);

    pub const ALL: [MxFormat; 5] = [
        MxFormat::E2M1,
        MxFormat::E3M2,
        MxFormat::E2M3,
        MxFormat::E4M3,
        MxFormat::E5M2,
    ];

    const fn new(
        name: FormatName,
        exponent_bits: u32,
        mantissa_bits: u32,
        bias: i32,
        specials: Specials,
    ) -> Self {
        MxFormat {
            name,
            exponent_bits,
            mantissa_bits,
            bias,
            specials,
        }
    }

    pub fn from_name(name: FormatName) -> Self {
        match name {
            FormatName::E2M1 => Self::E2M1,
            FormatName::E3M2 => Self::E3M2,
            FormatName::E2M3 => Self::E2M3,
            FormatName::E4M3 => Self::E4M3,
            FormatName::E5M2 => Self::E5M2,
        }
    }

    pub fn name(self) -> FormatName {
        self.name
    }

    pub fn element_bits(self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    pub fn exponent_bits(self) -> u32 {
        self.exponent_bits
    }

    pub fn mantissa_bits(self) -> u32 {
        self.mantissa_bits
    }

    /// Exponent bias `b`.
    pub fn bias(self) -> i32 {
        self.bias
    }

    pub fn block_size(self) -> usize {
        BLOCK_SIZE
    }

    pub fn scale_bits(self) -> u32 {
        SCALE_BITS
    }

    /// Largest finite magnitude, exactly.
    pub fn q_max(self) -> Rational {
        let m = self.mantissa_bits;
        let (exp_field, mant_field) = self.max_fields();
        let significand = (1i64 << m) + mant_field as i64;
        let exp = exp_field as i32 - self.bias - m as i32;
        if exp >= 0 {
            Ratio::from_integer(significand << exp)
        } else {
            Ratio::new(significand, 1i64 << -exp)
        }
    }

    pub fn q_max_f64(self) -> f64 {
        self.value_of_magnitude(self.max_magnitude_code())
    }

    /// Smallest exponent of a normal value, `1 - b`.
    pub fn min_normal_exponent(self) -> i32 {
        1 - self.bias
    }

    fn max_fields(self) -> (u32, u32) {
        let all_e = (1u32 << self.exponent_bits) - 1;
        let all_m = (1u32 << self.mantissa_bits) - 1;
        match self.specials {
            Specials::None => (all_e, all_m),
            Specials::NanOnly => (all_e, all_m - 1),
            Specials::Ieee => (all_e - 1, all_m),
        }
    }

    fn sign_shift(self) -> u32 {
        self.exponent_bits + self.mantissa_bits
    }

    fn magnitude_mask(self) -> u8 {
        ((1u16 << self.sign_shift()) - 1) as u8
    }

    /// Magnitude code of `q_max`.
    pub fn max_magnitude_code(self) -> u8 {
        let (e, m) = self.max_fields();
        ((e << self.mantissa_bits) | m) as u8
    }

    /// Number of distinct codes, `2^element_bits`.
    pub fn code_count(self) -> usize {
        1usize << self.element_bits()
    }

    fn value_of_magnitude(self, mag: u8) -> f64 {
        let m = self.mantissa_bits;
        let exp_field = (mag >> m) as u32;
        let mant = (mag as u32) & ((1 << m) - 1);
        let all_e = (1u32 << self.exponent_bits) - 1;
        match self.specials {
            Specials::NanOnly if exp_field == all_e && mant == (1 << m) - 1 => return f64::NAN,
            Specials::Ieee if exp_field == all_e => {
                return if mant == 0 { f64::INFINITY } else { f64::NAN };
            }
            _ => {}
        }
        if exp_field == 0 {
            mant as f64 * pow2_f64(self.min_normal_exponent() - m as i32)
        } else {
            ((1u32 << m) + mant) as f64 * pow2_f64(exp_field as i32 - self.bias - m as i32)
        }
    }

    /// Unscaled value of a code. Total over all codes: special FP8 encodings
    /// decode to NaN or infinity, which the encoder never produces.
    pub fn value(self, code: ElementCode) -> f64 {
        let v = self.value_of_magnitude(code.0 & self.magnitude_mask());
        if code.0 >> self.sign_shift() & 1 == 1 {
            -v
        } else {
            v
        }
    }

    /// All finite non-negative code points in ascending order.
    pub fn code_points(self) -> Vec<(ElementCode, f64)> {
        (0..=self.max_magnitude_code())
            .map(|c| (ElementCode(c), self.value_of_magnitude(c)))
            .collect()
    }

    /// Nearest code to an already-scaled value: round to nearest, ties to
    /// even mantissa, saturating at `±q_max`. The sign of zero is kept.
    pub fn encode_scaled(self, v: f64) -> ElementCode {
        debug_assert!(!v.is_nan());
        let sign = (v.is_sign_negative() as u8) << self.sign_shift();
        let a = v.abs();
        let mag = if a >= self.q_max_f64() {
            self.max_magnitude_code()
        } else {
            let emin = self.min_normal_exponent();
            let m = self.mantissa_bits as i32;
            let ex = if a == 0.0 { emin } else { floor_log2(a).max(emin) };
            // a / 2^(ex - m) is exact; the integer part carries the hidden bit
            let q = a * pow2_f64(m - ex);
            let r = q.round_ties_even() as u32;
            ((((ex - emin) as u32) << m) + r) as u8
        };
        ElementCode(sign | mag)
    }

    /// Compact format code used in binary files.
    pub fn file_code(self) -> u8 {
        match self.name {
            FormatName::E2M1 => 0,
            FormatName::E3M2 => 1,
            FormatName::E2M3 => 2,
            FormatName::E4M3 => 3,
            FormatName::E5M2 => 4,
        }
    }

    pub fn from_file_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.file_code() == code)
            .ok_or(Error::UnknownFormat(code))
    }
}

impl fmt::Display for MxFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.name, f)
    }
}

impl FromStr for MxFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E2M1" | "FP4" => Ok(Self::E2M1),
            "E3M2" => Ok(Self::E3M2),
            "E2M3" => Ok(Self::E2M3),
            "E4M3" => Ok(Self::E4M3),
            "E5M2" => Ok(Self::E5M2),
            _ => Err(Error::domain(format!("unknown MX element format {s:?}"))),
        }
    }
}

/// `floor(log2(a))` for a positive, normal `f64`.
pub(crate) fn floor_log2(a: f64) -> i32 {
    debug_assert!(a.is_normal() && a > 0.0);
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Shared power-of-two block scale, `2^e` with `e` in `[-127, 127]`.
///
/// Stored as the biased byte `e + 127`. Byte 255 (the NaN marker) is not a
/// valid scale and is rejected by [`E8M0Scale::from_byte`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct E8M0Scale(u8);

impl E8M0Scale {
    pub const MIN_EXPONENT: i32 = -127;
    pub const MAX_EXPONENT: i32 = 127;
    pub const NAN_BYTE: u8 = 0xff;
    /// `2^-127`, the zero-block scale.
    pub const MIN: E8M0Scale = E8M0Scale(0);

    /// Scale `2^e`, clamping `e` to the representable range.
    pub fn from_exponent(e: i32) -> Self {
        let e = e.clamp(Self::MIN_EXPONENT, Self::MAX_EXPONENT);
        E8M0Scale((e + 127) as u8)
    }

    pub fn from_byte(byte: u8) -> Result<Self> {
        if byte == Self::NAN_BYTE {
            Err(Error::InvalidScale(byte))
        } else {
            Ok(E8M0Scale(byte))
        }
    }

    pub fn to_byte(self) -> u8 {
        self.0
    }

    pub fn exponent(self) -> i32 {
        self.0 as i32 - 127
    }

    pub fn value(self) -> f64 {
        pow2_f64(self.exponent())
    }
}

/// One element code, right-aligned in a byte.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementCode(pub u8);

impl ElementCode {
    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn negate(self, fmt: MxFormat) -> Self {
        ElementCode(self.0 ^ (1 << fmt.sign_shift()))
    }

    pub fn is_negative(self, fmt: MxFormat) -> bool {
        self.0 >> fmt.sign_shift() & 1 == 1
    }

    pub fn magnitude(self, fmt: MxFormat) -> u8 {
        self.0 & fmt.magnitude_mask()
    }

    /// Whether the code fits the format's width.
    pub fn is_valid(self, fmt: MxFormat) -> bool {
        (self.0 as usize) < fmt.code_count()
    }
}

/// Scale `x` by the block scale and round it to the nearest element code.
pub fn encode_element(x: f32, scale: E8M0Scale, fmt: MxFormat) -> ElementCode {
    fmt.encode_scaled(x as f64 * pow2_f64(-scale.exponent()))
}

/// `2^e * value(code)` in `f32`.
pub fn decode_element(code: ElementCode, scale: E8M0Scale, fmt: MxFormat) -> f32 {
    (fmt.value(code) * scale.value()) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_parameters() {
        let expect = [
            (MxFormat::E5M2, 8, 15, Rational::from_integer(57344)),
            (MxFormat::E4M3, 8, 7, Rational::from_integer(448)),
            (MxFormat::E3M2, 6, 3, Rational::from_integer(28)),
            (MxFormat::E2M3, 6, 1, Rational::new(15, 2)),
            (MxFormat::E2M1, 4, 1, Rational::from_integer(6)),
        ];
        for (fmt, bits, bias, q_max) in expect {
            assert_eq!(fmt.element_bits(), bits, "{fmt}");
            assert_eq!(fmt.bias(), bias, "{fmt}");
            assert_eq!(fmt.q_max(), q_max, "{fmt}");
            assert_eq!(fmt.block_size(), 32);
            assert_eq!(fmt.scale_bits(), 8);
        }
    }

    #[test]
    fn e2m1_positive_values() {
        let vals: Vec<f64> = MxFormat::E2M1.code_points().into_iter().map(|(_, v)| v).collect();
        assert_eq!(vals, vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn decode_is_odd_and_total() {
        for fmt in MxFormat::ALL {
            for c in 0..fmt.code_count() as u8 {
                let code = ElementCode(c);
                let v = fmt.value(code);
                let n = fmt.value(code.negate(fmt));
                if v.is_nan() {
                    assert!(n.is_nan());
                } else {
                    assert_eq!(n, -v, "{fmt} code {c:#x}");
                }
            }
        }
    }

    #[test]
    fn fp8_specials() {
        assert!(MxFormat::E4M3.value(ElementCode(0x7f)).is_nan());
        assert_eq!(MxFormat::E4M3.value(ElementCode(0x7e)), 448.0);
        assert_eq!(MxFormat::E5M2.value(ElementCode(0x7c)), f64::INFINITY);
        assert!(MxFormat::E5M2.value(ElementCode(0x7d)).is_nan());
        assert_eq!(MxFormat::E5M2.value(ElementCode(0x7b)), 57344.0);
    }

    #[test]
    fn e4m3_max_normal_at_unit_scale() {
        let s = E8M0Scale::from_exponent(0);
        let code = ElementCode(MxFormat::E4M3.max_magnitude_code());
        assert_eq!(decode_element(code, s, MxFormat::E4M3), 448.0);
    }

    #[test]
    fn scale_bytes_round_trip() {
        for b in 0..=254u8 {
            let s = E8M0Scale::from_byte(b).unwrap();
            assert_eq!(E8M0Scale::from_exponent(s.exponent()).to_byte(), b);
            assert_eq!(s.value(), 2f64.powi(b as i32 - 127));
        }
        assert!(matches!(E8M0Scale::from_byte(255), Err(Error::InvalidScale(255))));
        assert_eq!(E8M0Scale::from_exponent(500).exponent(), 127);
        assert_eq!(E8M0Scale::from_exponent(-500).exponent(), -127);
    }

    #[test]
    fn encode_examples() {
        let fmt = MxFormat::E2M1;
        let s = E8M0Scale::from_exponent(1);
        let six = encode_element(6.0, s, fmt);
        assert_eq!(fmt.value(six), 3.0);
        assert_eq!(decode_element(six, s, fmt), 6.0);

        assert_eq!(encode_element(0.0, s, fmt), ElementCode(0));

        // 2.5 / 2 = 1.25 sits between 1.0 and 1.5
        let c = encode_element(2.5, s, fmt);
        assert_eq!(fmt.value(c), 1.0);
        assert_eq!(decode_element(c, s, fmt), 2.0);
    }

    #[test]
    fn encode_saturates_above_q_max() {
        let s = E8M0Scale::from_exponent(0);
        let c = encode_element(60000.0, s, MxFormat::E5M2);
        assert_eq!(MxFormat::E5M2.value(c), 57344.0);
        let c = encode_element(-1e9, s, MxFormat::E4M3);
        assert_eq!(MxFormat::E4M3.value(c), -448.0);
    }

    #[test]
    fn file_codes_round_trip() {
        for fmt in MxFormat::ALL {
            assert_eq!(MxFormat::from_file_code(fmt.file_code()).unwrap(), fmt);
            assert_eq!(fmt.to_string().parse::<MxFormat>().unwrap(), fmt);
        }
        assert!(matches!(MxFormat::from_file_code(9), Err(Error::UnknownFormat(9))));
    }
}
