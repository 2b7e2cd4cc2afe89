//! Reorder-and-quantize and the reference mixed-precision block-scaled GEMM.
//!
//! Summation contract, per output element: one FP32 accumulator; groups in
//! the order FP4, FP6, FP8; within a group, K-blocks in ascending order; each
//! block's 32 products summed in FP32 in ascending k, scaled once by
//! `2^(e_a + e_w)` and added to the accumulator. The result is rounded to
//! BF16. Anything that evaluates the same sums in the same order is
//! bit-identical to [`mixed_gemm`].

use rayon::prelude::*;

use crate::calib::ChannelPlan;
use crate::error::{Error, Result};
use crate::error_model::Precision;
use crate::mx::{
    dequantize_tensor, quantize_block, quantize_tensor, MxBlock, MxFormat, MxTensor, BLOCK_SIZE,
};
use crate::scalar::{pow2_f64, Scalar};
use crate::tensor::DenseTensor;

/// Round an `f32` to BF16 (round to nearest, ties to even) and return its
/// bit pattern.
pub fn round_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) | 0x0040) as u16;
    }
    let lsb = (bits >> 16) & 1;
    (bits.wrapping_add(0x7fff + lsb) >> 16) as u16
}

pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// GEMM output: BF16 bit patterns, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bf16Matrix {
    rows: usize,
    cols: usize,
    bits: Vec<u16>,
}

impl Bf16Matrix {
    pub fn from_f32(t: &DenseTensor<f32>) -> Self {
        Bf16Matrix {
            rows: t.rows(),
            cols: t.cols(),
            bits: t.as_slice().iter().map(|&v| round_bf16(v)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[u16] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        bf16_to_f32(self.bits[r * self.cols + c])
    }

    /// Widen to `f32` (exact).
    pub fn to_tensor(&self) -> DenseTensor<f32> {
        DenseTensor::from_fn(self.rows, self.cols, |r, c| self.get(r, c))
    }
}

/// Element formats of the three precision groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupFormats {
    pub fp6: MxFormat,
    pub fp8: MxFormat,
}

impl Default for GroupFormats {
    fn default() -> Self {
        GroupFormats {
            fp6: MxFormat::E3M2,
            fp8: MxFormat::E4M3,
        }
    }
}

impl GroupFormats {
    pub fn new(fp6: MxFormat, fp8: MxFormat) -> Result<Self> {
        if fp6.element_bits() != 6 || fp8.element_bits() != 8 {
            return Err(Error::domain(format!(
                "group formats must be 6- and 8-bit, got {fp6} and {fp8}"
            )));
        }
        Ok(GroupFormats { fp6, fp8 })
    }

    pub fn get(&self, p: Precision) -> MxFormat {
        match p {
            Precision::Fp4 => MxFormat::E2M1,
            Precision::Fp6 => self.fp6,
            Precision::Fp8 => self.fp8,
        }
    }

    fn all(&self) -> [MxFormat; 3] {
        Precision::ALL.map(|p| self.get(p))
    }
}

fn check_channels(plan: &ChannelPlan, found: usize, what: &str) -> Result<()> {
    if found != plan.num_channels && found != plan.padded_channels() {
        return Err(Error::shape(format!(
            "{what} has {found} channels, plan {} expects {} ({} padded)",
            plan.layer_id,
            plan.num_channels,
            plan.padded_channels()
        )));
    }
    Ok(())
}

/// Activations split into FP4/FP6/FP8 groups of reordered channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedActivation {
    layer_id: String,
    rows: usize,
    parts: [MxTensor; 3],
}

impl MixedActivation {
    pub fn from_parts(layer_id: impl Into<String>, parts: [MxTensor; 3]) -> Result<Self> {
        let rows = parts[0].rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::shape("activation parts disagree on row count"));
        }
        Ok(MixedActivation {
            layer_id: layer_id.into(),
            rows,
            parts,
        })
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn part(&self, p: Precision) -> &MxTensor {
        &self.parts[p as usize]
    }

    pub fn parts(&self) -> &[MxTensor; 3] {
        &self.parts
    }
}

/// Gather activation columns by the plan and block-quantize every group in
/// one pass. Semantically equal to permuting first and quantizing each
/// group's slice with [`quantize_tensor`].
pub fn reorder_and_quantize(
    x: &DenseTensor<f32>,
    plan: &ChannelPlan,
    formats: GroupFormats,
) -> Result<MixedActivation> {
    check_channels(plan, x.cols(), "activation")?;
    let parts = Precision::ALL.map(|p| {
        let range = plan.group_range(p);
        let fmt = formats.get(p);
        let mut blocks = Vec::with_capacity(x.rows() * range.len() / BLOCK_SIZE);
        let mut buf = [0.0f32; BLOCK_SIZE];
        for r in 0..x.rows() {
            let row = x.row(r);
            for chunk in plan.permutation[range.clone()].chunks_exact(BLOCK_SIZE) {
                for (slot, &c) in buf.iter_mut().zip(chunk) {
                    *slot = row.get(c).copied().unwrap_or(0.0);
                }
                blocks.push(quantize_block(&buf, fmt));
            }
        }
        MxTensor::from_blocks(fmt, x.rows(), range.len(), 0, blocks).expect("whole blocks")
    });
    MixedActivation::from_parts(plan.layer_id.clone(), parts)
}

/// Weight reordered and quantized once, offline.
///
/// Each part holds the weight rows of one precision group (a K-segment),
/// block-scaled along K. Storage is transposed: part `g` is an
/// `out_features x n_g` [`MxTensor`] so that each block runs along K.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    plan: ChannelPlan,
    out_features: usize,
    parts: [MxTensor; 3],
}

impl QuantizedLinear {
    pub fn from_parts(plan: ChannelPlan, parts: [MxTensor; 3]) -> Result<Self> {
        let out_features = parts[0].rows();
        for p in Precision::ALL {
            let part = &parts[p as usize];
            if part.rows() != out_features || part.cols() != plan.count(p) {
                return Err(Error::PlanMismatch(format!(
                    "{} weight part is {}x{} (stored), plan {} wants K = {}",
                    p.label(),
                    part.rows(),
                    part.cols(),
                    plan.layer_id,
                    plan.count(p)
                )));
            }
        }
        Ok(QuantizedLinear {
            plan,
            out_features,
            parts,
        })
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// Stored (transposed) part.
    pub fn part(&self, p: Precision) -> &MxTensor {
        &self.parts[p as usize]
    }

    pub fn parts(&self) -> &[MxTensor; 3] {
        &self.parts
    }

    /// Logical `(K-segment, out_features)` shape of a part.
    pub fn part_shape(&self, p: Precision) -> (usize, usize) {
        (self.plan.count(p), self.out_features)
    }

    /// Dequantized part in logical `K x N` orientation.
    pub fn dequantize_part(&self, p: Precision) -> DenseTensor<f32> {
        dequantize_tensor(self.part(p)).transpose()
    }
}

/// Permute weight rows by the plan, split into K-segments, quantize each
/// segment in 32-row blocks along K.
pub fn quantize_linear(
    w: &DenseTensor<f32>,
    plan: &ChannelPlan,
    formats: GroupFormats,
) -> Result<QuantizedLinear> {
    check_channels(plan, w.rows(), "weight")?;
    plan.validate()?;
    let n = w.cols();
    let parts = Precision::ALL.map(|p| {
        let range = plan.group_range(p);
        let fmt = formats.get(p);
        let mut blocks = Vec::with_capacity(n * range.len() / BLOCK_SIZE);
        let mut buf = [0.0f32; BLOCK_SIZE];
        for j in 0..n {
            for chunk in plan.permutation[range.clone()].chunks_exact(BLOCK_SIZE) {
                for (slot, &k) in buf.iter_mut().zip(chunk) {
                    *slot = if k < w.rows() { w.get(k, j) } else { 0.0 };
                }
                blocks.push(quantize_block(&buf, fmt));
            }
        }
        MxTensor::from_blocks(fmt, n, range.len(), 0, blocks).expect("whole blocks")
    });
    QuantizedLinear::from_parts(plan.clone(), parts)
}

fn code_table(fmt: MxFormat) -> Vec<f32> {
    (0..fmt.code_count())
        .map(|c| fmt.value(crate::mx::ElementCode(c as u8)) as f32)
        .collect()
}

/// `x * 2^exp` in FP32 with a single rounding.
fn scale_pow2(x: f32, exp: i32) -> f32 {
    (x as f64 * pow2_f64(exp)) as f32
}

fn block_dot(a: &MxBlock, w: &MxBlock, ta: &[f32], tw: &[f32]) -> f32 {
    let mut partial = 0.0f32;
    for (ca, cw) in a.codes.iter().zip(&w.codes) {
        partial += ta[ca.0 as usize] * tw[cw.0 as usize];
    }
    scale_pow2(partial, a.scale.exponent() + w.scale.exponent())
}

fn check_operands(a: &MixedActivation, lin: &QuantizedLinear) -> Result<()> {
    if a.layer_id != lin.plan.layer_id {
        return Err(Error::PlanMismatch(format!(
            "activation quantized for {}, weight for {}",
            a.layer_id, lin.plan.layer_id
        )));
    }
    for p in Precision::ALL {
        let (pa, pw) = (a.part(p), lin.part(p));
        if pa.cols() != pw.cols() {
            return Err(Error::PlanMismatch(format!(
                "{} group: activation has {} channels, weight {}",
                p.label(),
                pa.cols(),
                pw.cols()
            )));
        }
        if pa.format() != pw.format() {
            return Err(Error::PlanMismatch(format!(
                "{} group: activation is {}, weight is {}",
                p.label(),
                pa.format(),
                pw.format()
            )));
        }
    }
    Ok(())
}

/// FP32 accumulators of the mixed GEMM, before BF16 rounding.
pub fn mixed_gemm_f32(a: &MixedActivation, lin: &QuantizedLinear) -> Result<DenseTensor<f32>> {
    check_operands(a, lin)?;
    let tables: Vec<Vec<f32>> = a.parts.iter().map(|p| code_table(p.format())).collect();
    let n = lin.out_features;
    let data: Vec<f32> = (0..a.rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let tables = &tables;
            (0..n).map(move |j| {
                let mut acc = 0.0f32;
                for ((pa, pw), table) in a.parts.iter().zip(&lin.parts).zip(tables) {
                    for (ba, bw) in pa.row_blocks(i).iter().zip(pw.row_blocks(j)) {
                        acc += block_dot(ba, bw, table, table);
                    }
                }
                acc
            })
        })
        .collect();
    DenseTensor::new(a.rows, n, data).map_err(|_| overflow())
}

/// `Y = X W` on the quantized operands, FP32 accumulation, BF16 output.
pub fn mixed_gemm(a: &MixedActivation, lin: &QuantizedLinear) -> Result<Bf16Matrix> {
    Ok(Bf16Matrix::from_f32(&mixed_gemm_f32(a, lin)?))
}

/// Dense product summed in 32-wide K-blocks: per block a fresh partial sum in
/// ascending k, blocks added to one accumulator in ascending order. `K` need
/// not be a multiple of 32; the last block is then short.
pub fn blocked_matmul<T: Scalar>(x: &DenseTensor<T>, w: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    if x.cols() != w.rows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let k = x.cols();
    let y = DenseTensor::from_fn(x.rows(), w.cols(), |i, j| {
        let mut acc = T::zero();
        for start in (0..k).step_by(BLOCK_SIZE) {
            let mut partial = T::zero();
            for kk in start..(start + BLOCK_SIZE).min(k) {
                partial = partial + x.get(i, kk) * w.get(kk, j);
            }
            acc = acc + partial;
        }
        acc
    });
    if !y.as_slice().iter().all(|v| v.is_finite_val()) {
        return Err(overflow());
    }
    Ok(y)
}

fn overflow() -> Error {
    Error::domain("GEMM accumulator overflowed the 32-bit float range")
}

/// Dequantized operands (`L x P` activation, `P x N` weight) in reordered
/// channel space, computed through plain `quantize_tensor` and `dequantize_tensor`.
pub fn fake_quant_operands(
    x: &DenseTensor<f32>,
    w: &DenseTensor<f32>,
    plan: &ChannelPlan,
    formats: GroupFormats,
) -> Result<(DenseTensor<f32>, DenseTensor<f32>)> {
    check_channels(plan, x.cols(), "activation")?;
    check_channels(plan, w.rows(), "weight")?;
    plan.validate()?;
    let xp = x.gather_cols(&plan.permutation);
    let wt = w.gather_rows(&plan.permutation).transpose();
    let mut xq = DenseTensor::zeros(x.rows(), plan.padded_channels());
    let mut wq = DenseTensor::zeros(plan.padded_channels(), w.cols());
    for (p, fmt) in Precision::ALL.into_iter().zip(formats.all()) {
        let range = plan.group_range(p);
        let idx: Vec<usize> = range.clone().collect();
        let xs = dequantize_tensor(&quantize_tensor(&xp.gather_cols(&idx), fmt)?);
        let ws = dequantize_tensor(&quantize_tensor(&wt.gather_cols(&idx), fmt)?);
        for (local, pos) in range.enumerate() {
            for r in 0..x.rows() {
                xq.set(r, pos, xs.get(r, local));
            }
            for j in 0..w.cols() {
                wq.set(pos, j, ws.get(j, local));
            }
        }
    }
    Ok((xq, wq))
}

/// Oracle for [`mixed_gemm`]: dequantize both operands to dense FP32 first,
/// then run [`blocked_matmul`] and round to BF16.
pub fn fake_quant_gemm_reference(
    x: &DenseTensor<f32>,
    w: &DenseTensor<f32>,
    plan: &ChannelPlan,
    formats: GroupFormats,
) -> Result<Bf16Matrix> {
    let (xq, wq) = fake_quant_operands(x, w, plan, formats)?;
    Ok(Bf16Matrix::from_f32(&blocked_matmul(&xq, &wq)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_model::thresholds;
    use crate::mx::quantize_tensor;

    /// BF16 rounding by comparing the two neighbouring BF16 values directly.
    fn bf16_oracle(x: f32) -> u16 {
        let down = (x.to_bits() >> 16) as u16;
        let lo = bf16_to_f32(down) as f64;
        let hi = bf16_to_f32(down + 1) as f64;
        let (dl, dh) = ((x as f64 - lo).abs(), (hi - x as f64).abs());
        if dl < dh || (dl == dh && down.is_multiple_of(2)) {
            down
        } else {
            down + 1
        }
    }

    #[test]
    fn bf16_examples() {
        assert_eq!(bf16_to_f32(round_bf16(1.0)), 1.0);
        assert_eq!(bf16_to_f32(round_bf16(std::f32::consts::PI)), 3.140625);
        // 1 + 2^-8 is halfway between 1 and 1 + 2^-7: even neighbour is 1
        assert_eq!(bf16_to_f32(round_bf16(1.0 + 2f32.powi(-8))), 1.0);
        // 1 + 3*2^-8 is halfway between 1 + 2^-7 and 1 + 2^-6: even is the upper
        assert_eq!(bf16_to_f32(round_bf16(1.0 + 3.0 * 2f32.powi(-8))), 1.0 + 2f32.powi(-6));
        assert_eq!(round_bf16(-0.0), 0x8000);
    }

    #[test]
    fn bf16_matches_neighbour_oracle() {
        let mut bits = 0x0001_2345u32;
        for _ in 0..200_000 {
            bits = bits.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            let x = f32::from_bits(bits & 0x7f7f_ffff);
            if !x.is_finite() || x >= f32::MAX / 2.0 {
                continue;
            }
            assert_eq!(round_bf16(x), bf16_oracle(x), "{x:e}");
            assert_eq!(round_bf16(-x), bf16_oracle(-x) | 0x8000);
        }
    }

    fn lcg_tensor(rows: usize, cols: usize, seed: u64) -> DenseTensor<f32> {
        let mut s = seed;
        DenseTensor::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f32 / (1u64 << 31) as f32 - 0.5) * 8.0
        })
    }

    #[test]
    fn identity_fp4_plan_matches_quantize_tensor() {
        let x = lcg_tensor(3, 32, 1);
        let plan = ChannelPlan::uniform("l", 32, Precision::Fp4);
        let a = reorder_and_quantize(&x, &plan, GroupFormats::default()).unwrap();
        assert_eq!(*a.part(Precision::Fp4), quantize_tensor(&x, MxFormat::E2M1).unwrap());
        assert_eq!(a.part(Precision::Fp6).cols(), 0);
        assert_eq!(a.part(Precision::Fp8).cols(), 0);
        assert_eq!(a.part(Precision::Fp8).rows(), 3);
    }

    #[test]
    fn weight_part_shapes() {
        let w = lcg_tensor(64, 32, 2);
        let t = thresholds(1.0).unwrap();
        let plan = ChannelPlan::from_parts("l", 64, (0..64).rev().collect(), [32, 32, 0], t).unwrap();
        let lin = quantize_linear(&w, &plan, GroupFormats::default()).unwrap();
        assert_eq!(lin.part_shape(Precision::Fp4), (32, 32));
        assert_eq!(lin.part_shape(Precision::Fp6), (32, 32));
        assert_eq!(lin.part_shape(Precision::Fp8), (0, 32));
        // storage is transposed; decoded values match quantizing the
        // transposed segment directly
        let seg: Vec<usize> = (32..64).rev().collect();
        let direct = quantize_tensor(&w.gather_rows(&seg).transpose(), MxFormat::E2M1).unwrap();
        assert_eq!(lin.dequantize_part(Precision::Fp4), dequantize_tensor(&direct).transpose());
    }

    #[test]
    fn identity_weight_decodes_exactly() {
        let w = DenseTensor::from_fn(32, 32, |r, c| if r == c { 1.0f32 } else { 0.0 });
        let plan = ChannelPlan::uniform("l", 32, Precision::Fp8);
        let lin = quantize_linear(&w, &plan, GroupFormats::default()).unwrap();
        assert_eq!(lin.dequantize_part(Precision::Fp8), w);
    }

    #[test]
    fn zero_activation_gives_zero_output() {
        let x = DenseTensor::zeros(4, 64);
        let w = lcg_tensor(64, 8, 3);
        let t = thresholds(1.0).unwrap();
        let plan = ChannelPlan::from_parts("l", 64, (0..64).collect(), [32, 0, 32], t).unwrap();
        let fm = GroupFormats::default();
        let y = mixed_gemm(
            &reorder_and_quantize(&x, &plan, fm).unwrap(),
            &quantize_linear(&w, &plan, fm).unwrap(),
        )
        .unwrap();
        assert!(y.to_tensor().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_selects_a_weight_row() {
        let w = DenseTensor::from_fn(32, 5, |r, c| ((r * 5 + c) % 13) as f32 - 6.0);
        let plan = ChannelPlan::uniform("l", 32, Precision::Fp8);
        let fm = GroupFormats::default();
        let lin = quantize_linear(&w, &plan, fm).unwrap();
        for k in [0, 7, 31] {
            let x = DenseTensor::from_fn(1, 32, |_, c| if c == k { 1.0 } else { 0.0 });
            let y = mixed_gemm(&reorder_and_quantize(&x, &plan, fm).unwrap(), &lin).unwrap();
            for j in 0..5 {
                assert_eq!(y.get(0, j), w.get(k, j));
            }
        }
    }

    #[test]
    fn matches_reference_on_worked_example() {
        let x = lcg_tensor(8, 64, 4);
        let w = lcg_tensor(64, 16, 5);
        let t = thresholds(4.0).unwrap();
        let perm: Vec<usize> = (0..64).map(|i| (i * 23) % 64).collect();
        let plan = ChannelPlan::from_parts("l", 64, perm, [32, 32, 0], t).unwrap();
        for fm in [
            GroupFormats::default(),
            GroupFormats::new(MxFormat::E2M3, MxFormat::E5M2).unwrap(),
        ] {
            let a = reorder_and_quantize(&x, &plan, fm).unwrap();
            let lin = quantize_linear(&w, &plan, fm).unwrap();
            let y = mixed_gemm(&a, &lin).unwrap();
            let r = fake_quant_gemm_reference(&x, &w, &plan, fm).unwrap();
            assert_eq!(y, r);
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let x = DenseTensor::new(1, 32, vec![3.0e38f32; 32]).unwrap();
        let w = DenseTensor::new(32, 1, vec![3.0e38f32; 32]).unwrap();
        let plan = ChannelPlan::uniform("l", 32, Precision::Fp8);
        let fm = GroupFormats::default();
        let a = reorder_and_quantize(&x, &plan, fm).unwrap();
        let lin = quantize_linear(&w, &plan, fm).unwrap();
        assert!(matches!(mixed_gemm(&a, &lin), Err(Error::Domain(_))));
        assert!(matches!(fake_quant_gemm_reference(&x, &w, &plan, fm), Err(Error::Domain(_))));
    }

    #[test]
    fn mismatches_are_rejected() {
        let x = lcg_tensor(2, 64, 6);
        let w = lcg_tensor(64, 4, 7);
        let fm = GroupFormats::default();
        let p4 = ChannelPlan::uniform("a", 64, Precision::Fp4);
        let p8 = ChannelPlan::uniform("a", 64, Precision::Fp8);
        let a = reorder_and_quantize(&x, &p4, fm).unwrap();
        let lin = quantize_linear(&w, &p8, fm).unwrap();
        assert!(matches!(mixed_gemm(&a, &lin), Err(Error::PlanMismatch(_))));
        let other = ChannelPlan::uniform("b", 64, Precision::Fp4);
        let lin_b = quantize_linear(&w, &other, fm).unwrap();
        assert!(matches!(mixed_gemm(&a, &lin_b), Err(Error::PlanMismatch(_))));
        assert!(matches!(
            reorder_and_quantize(&lcg_tensor(2, 50, 8), &p4, fm),
            Err(Error::Shape(_))
        ));
        assert!(GroupFormats::new(MxFormat::E4M3, MxFormat::E3M2).is_err());
    }

    #[test]
    fn padded_channels_are_ignored() {
        // 40 real channels, padded to 64
        let x = lcg_tensor(3, 40, 9);
        let w = lcg_tensor(40, 6, 10);
        let plan = ChannelPlan::uniform("l", 40, Precision::Fp8);
        let fm = GroupFormats::default();
        let y = mixed_gemm(
            &reorder_and_quantize(&x, &plan, fm).unwrap(),
            &quantize_linear(&w, &plan, fm).unwrap(),
        )
        .unwrap();
        assert_eq!(y, fake_quant_gemm_reference(&x, &w, &plan, fm).unwrap());
        assert_eq!((y.rows(), y.cols()), (3, 6));
    }
}
