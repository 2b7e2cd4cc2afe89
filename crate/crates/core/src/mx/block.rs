//! Block quantization: one E8M0 scale per 32 contiguous elements.

use crate::error::{Error, Result};
use crate::mx::format::{
    decode_element, encode_element, floor_log2, E8M0Scale, ElementCode, MxFormat, BLOCK_SIZE,
};
use crate::tensor::DenseTensor;

/// Shared scale for a block: `2^(floor(log2 max|v|) - b)`, clamped to the
/// E8M0 range. An all-zero block gets the smallest scale, `2^-127`.
pub fn block_scale(values: &[f32], fmt: MxFormat) -> E8M0Scale {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return E8M0Scale::from_exponent(E8M0Scale::MIN_EXPONENT);
    }
    // every f32, subnormals included, is a normal f64
    E8M0Scale::from_exponent(floor_log2(max as f64) - fmt.bias())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MxBlock {
    pub scale: E8M0Scale,
    pub codes: [ElementCode; BLOCK_SIZE],
}

impl MxBlock {
    pub const ZERO: MxBlock = MxBlock {
        scale: E8M0Scale::MIN,
        codes: [ElementCode(0); BLOCK_SIZE],
    };
}

pub fn quantize_block(values: &[f32; BLOCK_SIZE], fmt: MxFormat) -> MxBlock {
    debug_assert!(values.iter().all(|v| v.is_finite()));
    let scale = block_scale(values, fmt);
    MxBlock {
        scale,
        codes: values.map(|v| encode_element(v, scale, fmt)),
    }
}

pub fn dequantize_block(block: &MxBlock, fmt: MxFormat) -> [f32; BLOCK_SIZE] {
    block.codes.map(|c| decode_element(c, block.scale, fmt))
}

/// A block-quantized matrix. Each row is split into 32-wide column groups,
/// blocks are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MxTensor {
    format: MxFormat,
    rows: usize,
    cols: usize,
    pad: usize,
    blocks: Vec<MxBlock>,
}

impl MxTensor {
    /// Assemble from parts; `cols` must be a multiple of 32 and the block
    /// count must equal `rows * cols / 32`.
    pub fn from_blocks(
        format: MxFormat,
        rows: usize,
        cols: usize,
        pad: usize,
        blocks: Vec<MxBlock>,
    ) -> Result<Self> {
        if !cols.is_multiple_of(BLOCK_SIZE) {
            return Err(Error::shape(format!("{cols} columns is not a multiple of {BLOCK_SIZE}")));
        }
        if pad > cols {
            return Err(Error::shape(format!("padding {pad} exceeds {cols} columns")));
        }
        if blocks.len() != rows * cols / BLOCK_SIZE {
            return Err(Error::shape(format!(
                "{} blocks for a {rows}x{cols} tensor",
                blocks.len()
            )));
        }
        if let Some(c) = blocks
            .iter()
            .flat_map(|b| b.codes.iter())
            .find(|c| !c.is_valid(format))
        {
            return Err(Error::domain(format!("code {:#x} is wider than {format}", c.0)));
        }
        Ok(MxTensor {
            format,
            rows,
            cols,
            pad,
            blocks,
        })
    }

    pub fn format(&self) -> MxFormat {
        self.format
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Stored columns, including padding.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Zero columns appended at ingestion.
    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / BLOCK_SIZE
    }

    pub fn blocks(&self) -> &[MxBlock] {
        &self.blocks
    }

    pub fn block(&self, row: usize, group: usize) -> &MxBlock {
        &self.blocks[row * self.blocks_per_row() + group]
    }

    pub fn row_blocks(&self, row: usize) -> &[MxBlock] {
        let n = self.blocks_per_row();
        &self.blocks[row * n..(row + 1) * n]
    }
}

/// Quantize a tensor whose column count is a multiple of 32.
pub fn quantize_tensor(t: &DenseTensor<f32>, fmt: MxFormat) -> Result<MxTensor> {
    if !t.cols().is_multiple_of(BLOCK_SIZE) {
        return Err(Error::shape(format!(
            "{} columns is not a multiple of {BLOCK_SIZE}; pad first",
            t.cols()
        )));
    }
    let blocks = t
        .as_slice()
        .chunks_exact(BLOCK_SIZE)
        .map(|chunk| quantize_block(chunk.try_into().expect("32-wide chunk"), fmt))
        .collect();
    Ok(MxTensor {
        format: fmt,
        rows: t.rows(),
        cols: t.cols(),
        pad: 0,
        blocks,
    })
}

/// Zero-pad columns to a multiple of 32, then quantize. The padding is
/// recorded and dropped again by [`dequantize_tensor`].
pub fn quantize_tensor_padded(t: &DenseTensor<f32>, fmt: MxFormat) -> MxTensor {
    let (padded, pad) = t.pad_cols(BLOCK_SIZE);
    let mut q = quantize_tensor(&padded, fmt).expect("padded to a block multiple");
    q.pad = pad;
    q
}

pub fn dequantize_tensor(q: &MxTensor) -> DenseTensor<f32> {
    let logical = q.cols - q.pad;
    let mut data = Vec::with_capacity(q.rows * logical);
    for r in 0..q.rows {
        let row: Vec<f32> = q
            .row_blocks(r)
            .iter()
            .flat_map(|b| dequantize_block(b, q.format))
            .collect();
        data.extend_from_slice(&row[..logical]);
    }
    DenseTensor::new(q.rows, logical, data).expect("decoded values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_of(head: &[f32]) -> [f32; 32] {
        let mut v = [0.0f32; 32];
        v[..head.len()].copy_from_slice(head);
        v
    }

    #[test]
    fn scale_examples() {
        assert_eq!(block_scale(&block_of(&[448.0]), MxFormat::E4M3).exponent(), 1);
        assert_eq!(block_scale(&block_of(&[-6.0, 1.0]), MxFormat::E2M1).exponent(), 1);
        for fmt in MxFormat::ALL {
            assert_eq!(block_scale(&[0.0; 32], fmt).exponent(), -127);
        }
    }

    #[test]
    fn scale_clamps_for_tiny_and_huge_blocks() {
        let tiny = block_of(&[f32::from_bits(1)]); // 2^-149
        assert_eq!(block_scale(&tiny, MxFormat::E2M1).exponent(), -127);
        let huge = block_of(&[f32::MAX]);
        assert_eq!(block_scale(&huge, MxFormat::E2M1).exponent(), 126);
    }

    #[test]
    fn constant_max_block_is_exact() {
        let b = quantize_block(&[448.0; 32], MxFormat::E4M3);
        assert_eq!(b.scale.exponent(), 1);
        assert_eq!(dequantize_block(&b, MxFormat::E4M3), [448.0; 32]);
    }

    #[test]
    fn zero_block() {
        let b = quantize_block(&[0.0; 32], MxFormat::E2M1);
        assert_eq!(b, MxBlock::ZERO);
        assert_eq!(dequantize_block(&b, MxFormat::E2M1), [0.0; 32]);
    }

    #[test]
    fn fp4_six_and_one() {
        let fmt = MxFormat::E2M1;
        let b = quantize_block(&block_of(&[6.0, 1.0]), fmt);
        assert_eq!(b.scale.exponent(), 1);
        assert_eq!(fmt.value(b.codes[0]), 3.0);
        assert_eq!(fmt.value(b.codes[1]), 0.5);
        assert_eq!(dequantize_block(&b, fmt)[..2], [6.0, 1.0]);
    }

    #[test]
    fn tensor_block_layout() {
        let t = DenseTensor::from_fn(2, 64, |r, c| (r * 64 + c) as f32);
        let q = quantize_tensor(&t, MxFormat::E4M3).unwrap();
        assert_eq!(q.blocks().len(), 4);
        // row-major: block (1, 0) holds values 64..96
        let b = dequantize_block(q.block(1, 0), MxFormat::E4M3);
        assert_eq!(b[0], 64.0);
        let one = quantize_tensor(&DenseTensor::zeros(1, 32), MxFormat::E2M1).unwrap();
        assert_eq!(one.blocks().len(), 1);
    }

    #[test]
    fn unpadded_shape_error_and_padding() {
        let t = DenseTensor::from_fn(3, 40, |r, c| ((r + c) % 8) as f32 * 0.5);
        assert!(matches!(quantize_tensor(&t, MxFormat::E4M3), Err(Error::Shape(_))));
        let q = quantize_tensor_padded(&t, MxFormat::E4M3);
        assert_eq!((q.cols(), q.pad()), (64, 24));
        let back = dequantize_tensor(&q);
        assert_eq!(back.shape(), (3, 40));
        assert_eq!(back, t);
    }

    #[test]
    fn from_blocks_validates() {
        assert!(MxTensor::from_blocks(MxFormat::E2M1, 1, 32, 0, vec![MxBlock::ZERO]).is_ok());
        assert!(MxTensor::from_blocks(MxFormat::E2M1, 1, 31, 0, vec![]).is_err());
        assert!(MxTensor::from_blocks(MxFormat::E2M1, 2, 32, 0, vec![MxBlock::ZERO]).is_err());
        let mut wide = MxBlock::ZERO;
        wide.codes[3] = ElementCode(0x10);
        assert!(MxTensor::from_blocks(MxFormat::E2M1, 1, 32, 0, vec![wide]).is_err());
        assert!(MxTensor::from_blocks(MxFormat::E4M3, 1, 32, 0, vec![wide]).is_ok());
    }
}
