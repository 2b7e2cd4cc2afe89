//! Bit-exact Microscaling (MX) formats and MXFP4/MXFP6/MXFP8 mixed-precision
//! quantization.
//!
//! The crate covers the whole offline/reference path: E8M0 block scales and
//! element encoders, the quantization-error model and outlier thresholds,
//! calibration into per-layer channel plans, fused reorder-and-quantize, and a
//! mixed-precision block-scaled GEMM with FP32 accumulation and BF16 output.

pub mod calib;
pub mod cli;
pub mod error;
pub mod error_model;
pub mod gemm;
pub mod io;
pub mod mx;
pub mod report;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use mx::{
    block_scale, decode_element, dequantize_block, dequantize_tensor, encode_element,
    quantize_block, quantize_tensor, quantize_tensor_padded, E8M0Scale, ElementCode, FormatName,
    MxBlock, MxFormat, MxTensor, BLOCK_SIZE,
};
pub use scalar::{Rational, Real, Scalar};
pub use tensor::DenseTensor;

/// Ingested activations and weights.
pub type Tensor = DenseTensor<f32>;
/// Dense matrix in double precision, used for reference products.
pub type Tensor64 = DenseTensor<f64>;
/// Dense matrix over exact rationals.
pub type RationalTensor = DenseTensor<Rational>;
