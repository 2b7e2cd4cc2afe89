#![allow(dead_code)]

use micromix::calib::ChannelPlan;
use micromix::error_model::thresholds;
use micromix::gemm::GroupFormats;
use micromix::{MxFormat, Tensor, BLOCK_SIZE};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Finite non-negative values of a format, built from the bit layout alone:
/// `(magnitude code, value)` in code order.
pub fn oracle_table(fmt: MxFormat) -> Vec<(u8, f64)> {
    let e_bits = fmt.exponent_bits();
    let m_bits = fmt.mantissa_bits();
    let bias = fmt.bias();
    let mut out = Vec::new();
    for code in 0u32..(1 << (e_bits + m_bits)) {
        let e = code >> m_bits;
        let m = code & ((1 << m_bits) - 1);
        // FP8 special encodings
        if fmt == MxFormat::E4M3 && code == 0x7f {
            continue;
        }
        if fmt == MxFormat::E5M2 && e == 31 {
            continue;
        }
        let frac = m as f64 / (1u32 << m_bits) as f64;
        let v = if e == 0 {
            frac * 2f64.powi(1 - bias)
        } else {
            (1.0 + frac) * 2f64.powi(e as i32 - bias)
        };
        out.push((code as u8, v));
    }
    out
}

pub fn sign_bit(fmt: MxFormat) -> u8 {
    1 << (fmt.exponent_bits() + fmt.mantissa_bits())
}

/// floor(log2 x) by counting, for x > 0.
pub fn oracle_floor_log2(x: f64) -> i32 {
    let mut k = 0i32;
    while 2f64.powi(k) <= x {
        k += 1;
    }
    while 2f64.powi(k) > x {
        k -= 1;
    }
    k
}

pub fn oracle_scale_exp(block: &[f32], fmt: MxFormat) -> i32 {
    let m = block.iter().fold(0f64, |a, &v| a.max((v as f64).abs()));
    if m == 0.0 {
        return -127;
    }
    (oracle_floor_log2(m) - fmt.bias()).clamp(-127, 127)
}

/// Nearest code by exhaustive search; ties go to the even code.
pub fn oracle_encode(table: &[(u8, f64)], x: f32, scale_exp: i32, fmt: MxFormat) -> u8 {
    let v = x as f64 / 2f64.powi(scale_exp);
    let a = v.abs();
    // past the largest code every distance is dominated by the same term
    let top = *table.last().unwrap();
    let mut best = table[0];
    let mut best_d = f64::INFINITY;
    for &(c, val) in table {
        let d = (a - val).abs();
        if d < best_d || (d == best_d && c % 2 == 0) {
            best = (c, val);
            best_d = d;
        }
    }
    if a > top.1 {
        best = top;
    }
    if x.is_sign_negative() {
        best.0 | sign_bit(fmt)
    } else {
        best.0
    }
}

pub fn gaussian(rng: &mut impl Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Blocks from several families: Gaussian at random magnitudes, exact code
/// midpoints, near-saturation magnitudes, random finite bit patterns, and
/// sparse blocks with zeros of both signs.
pub fn random_block(rng: &mut impl Rng, table: &[(u8, f64)], family: u32) -> [f32; BLOCK_SIZE] {
    let mut b = [0f32; BLOCK_SIZE];
    match family % 5 {
        0 => {
            let s = 2f32.powi(rng.gen_range(-40..40));
            for v in &mut b {
                *v = gaussian(rng) * s;
            }
        }
        1 => {
            let e = rng.gen_range(-20..20);
            for v in &mut b {
                let i = rng.gen_range(0..table.len() - 1);
                let mid = (table[i].1 + table[i + 1].1) / 2.0;
                let pick = match rng.gen_range(0..3) {
                    0 => mid,
                    1 => table[i].1,
                    _ => table[i].1 + (table[i + 1].1 - table[i].1) * rng.gen::<f64>(),
                };
                let sign = if rng.gen() { -1.0 } else { 1.0 };
                *v = (sign * pick * 2f64.powi(e)) as f32;
            }
        }
        2 => {
            // block max lands anywhere in its binade, top values included
            let top = 2f64.powi(oracle_floor_log2(table.last().unwrap().1) + 1);
            let e = rng.gen_range(-30..30);
            for v in &mut b {
                let m = top * (0.5 + 0.5 * rng.gen::<f64>());
                *v = (m * 2f64.powi(e) * if rng.gen() { -1.0 } else { 1.0 }) as f32;
            }
            b[rng.gen_range(0..BLOCK_SIZE)] = ((top - 2f64.powi(-10)) * 2f64.powi(e)) as f32;
        }
        3 => {
            for v in &mut b {
                *v = loop {
                    let f = f32::from_bits(rng.gen());
                    if f.is_finite() {
                        break f;
                    }
                };
            }
        }
        _ => {
            let s = 2f32.powi(rng.gen_range(-10..10));
            for v in &mut b {
                *v = match rng.gen_range(0..4) {
                    0 => 0.0,
                    1 => -0.0,
                    _ => gaussian(rng) * s,
                };
            }
        }
    }
    b
}

pub fn gaussian_tensor(rng: &mut impl Rng, rows: usize, cols: usize, std: &[f32]) -> Tensor {
    Tensor::from_fn(rows, cols, |_, c| gaussian(rng) * std[c % std.len()])
}

/// A plan with random counts (multiples of 32) and a random permutation.
pub fn random_plan(rng: &mut impl Rng, channels: usize) -> ChannelPlan {
    let blocks = channels.div_ceil(BLOCK_SIZE);
    let b8 = rng.gen_range(0..=blocks);
    let b6 = rng.gen_range(0..=blocks - b8);
    let counts = [
        (blocks - b8 - b6) * BLOCK_SIZE,
        b6 * BLOCK_SIZE,
        b8 * BLOCK_SIZE,
    ];
    let mut perm: Vec<usize> = (0..blocks * BLOCK_SIZE).collect();
    perm.shuffle(rng);
    ChannelPlan::from_parts("rand", channels, perm, counts, thresholds(1.0).unwrap()).unwrap()
}

pub fn random_formats(rng: &mut impl Rng) -> GroupFormats {
    let fp6 = *[MxFormat::E3M2, MxFormat::E2M3].choose(rng).unwrap();
    let fp8 = *[MxFormat::E4M3, MxFormat::E5M2].choose(rng).unwrap();
    GroupFormats::new(fp6, fp8).unwrap()
}
