//! JPEG-compliant preprocessing, blockwise DCT, trainable quantization and
//! reconstruction.
//!
//! The plain (non-differentiable) path in this module is what the entropy
//! coder, metrics and CLI use. [`diff`] builds the same computation on an
//! engine [`Tape`](crate::engine::Tape) so that compression kernels can be
//! trained; tests check that both paths agree.

mod blocks;
mod color;
pub mod diff;
mod image;
mod kernels;
pub(crate) mod pipeline;
mod sampling;

pub use blocks::{blockify, deblockify, dct_forward, dequantize, idct, quantize, BlockGrid, Channel, DctBasis};
pub use color::{rgb_to_ycbcr, ycbcr_to_rgb, ColorTransform};
pub use image::{ImageRgb, Plane, MIN_DIM};
pub use kernels::{quality_scale, CompressionKernels, QTable, STD_CHROMA_QTABLE, STD_LUMA_QTABLE};
pub use pipeline::{decode_pipeline, encode_coefficients, encode_pipeline, pad_to_multiple, transform, EncodedImage, MACROBLOCK};
pub use sampling::{subsample_420, upsample_420, ImageYCbCr, YCbCrFull};

/// Block edge length.
pub const BLOCK: usize = 8;
/// Coefficients per block.
pub const BLOCK_AREA: usize = BLOCK * BLOCK;
