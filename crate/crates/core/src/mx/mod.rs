//! Microscaling element formats and block quantization.

pub mod block;
pub mod format;

pub use block::{
    block_scale, dequantize_block, dequantize_tensor, quantize_block, quantize_tensor,
    quantize_tensor_padded, MxBlock, MxTensor,
};
pub use format::{
    decode_element, encode_element, E8M0Scale, ElementCode, FormatName, MxFormat, BLOCK_SIZE,
    SCALE_BITS,
};
