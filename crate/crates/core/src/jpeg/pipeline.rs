use super::{
    blockify, dct_forward, deblockify, dequantize, idct, quantize, rgb_to_ycbcr, subsample_420, upsample_420,
    ycbcr_to_rgb, BlockGrid, Channel, ColorTransform, CompressionKernels, ImageRgb, ImageYCbCr,
};
use crate::error::Result;

/// Macroblock edge for 4:2:0.
pub const MACROBLOCK: usize = 16;

/// Quantized coefficients of one image plus the size to crop back to.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub width: usize,
    pub height: usize,
    pub grids: [BlockGrid; 3],
}

/// Pads right/bottom to a multiple of `m` by edge replication.
pub fn pad_to_multiple(img: &ImageRgb, m: usize) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(3 * pw * ph);
    for c in 0..3 {
        let p = img.plane(c);
        for y in 0..ph {
            let row = &p[y.min(h - 1) * w..y.min(h - 1) * w + w];
            for x in 0..pw {
                data.push(row[x.min(w - 1)]);
            }
        }
    }
    ImageRgb::from_planar_unchecked(pw, ph, data)
}

/// Colour transform, level shift, 4:2:0 subsampling and blockwise DCT (unquantized).
pub fn transform(img: &ImageRgb, ct: &ColorTransform) -> Result<[BlockGrid; 3]> {
    let padded = pad_to_multiple(img, MACROBLOCK);
    let sub = subsample_420(&rgb_to_ycbcr(&padded, ct))?;
    Ok([
        dct_forward(&blockify(&sub.y, Channel::Y)),
        dct_forward(&blockify(&sub.cb, Channel::Cb)),
        dct_forward(&blockify(&sub.cr, Channel::Cr)),
    ])
}

/// Encoder half: [`transform`] followed by quantization with each channel's kernel.
pub fn encode_pipeline(img: &ImageRgb, ct: &ColorTransform, kernels: &CompressionKernels) -> Result<EncodedImage> {
    let coeffs = transform(img, ct)?;
    encode_coefficients(coeffs, img.width(), img.height(), kernels)
}

pub fn encode_coefficients(
    coeffs: [BlockGrid; 3],
    width: usize,
    height: usize,
    kernels: &CompressionKernels,
) -> Result<EncodedImage> {
    let [y, cb, cr] = coeffs;
    Ok(EncodedImage {
        width,
        height,
        grids: [
            quantize(&y, kernels.channel(Channel::Y))?,
            quantize(&cb, kernels.channel(Channel::Cb))?,
            quantize(&cr, kernels.channel(Channel::Cr))?,
        ],
    })
}

/// Decoder half: dequantize, IDCT, chroma upsampling, inverse colour, crop.
pub fn decode_pipeline(enc: &EncodedImage, ct: &ColorTransform, kernels: &CompressionKernels) -> ImageRgb {
    let plane = |c: Channel| deblockify(&idct(&dequantize(&enc.grids[c.index()], kernels.channel(c))));
    let img = ImageYCbCr {
        y: plane(Channel::Y),
        cb: plane(Channel::Cb),
        cr: plane(Channel::Cr),
        level_shifted: true,
    };
    let rgb = ycbcr_to_rgb(&upsample_420(&img), ct);
    rgb.crop(enc.width, enc.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn constant_gray_reconstructs_within_one_level() {
        for v in [0.0, 37.0, 128.0, 200.0, 255.0] {
            let img = ImageRgb::filled(24, 20, [v; 3]);
            let k = CompressionKernels::ones();
            let ct = ColorTransform::jpeg();
            let out = decode_pipeline(&encode_pipeline(&img, &ct, &k).unwrap(), &ct, &k);
            assert_eq!((out.width(), out.height()), (24, 20));
            assert!(out.planar().iter().all(|&s| (s - v).abs() <= 1.0), "gray {v}");
        }
    }

    #[test]
    fn zero_kernels_give_mid_gray() {
        let img = ImageRgb::from_rgb8(16, 16, &(0..768).map(|i| (i * 7 % 256) as u8).collect::<Vec<_>>()).unwrap();
        let ct = ColorTransform::jpeg();
        let k = CompressionKernels::zeros();
        let enc = encode_pipeline(&img, &ct, &k).unwrap();
        assert!(enc.grids.iter().all(|g| g.blocks.iter().all(|b| b.iter().all(|&v| v == 0.0))));
        let out = decode_pipeline(&enc, &ct, &k);
        assert!(out.planar().iter().all(|&s| (s - 128.0).abs() < 1e-9));
    }

    #[test]
    fn unit_kernels_are_high_fidelity() {
        let data: Vec<u8> = (0..32 * 32)
            .flat_map(|i| {
                let (x, y) = (i % 32, i / 32);
                [(x * 8) as u8, (y * 8) as u8, ((x + y) * 4) as u8]
            })
            .collect();
        let img = ImageRgb::from_rgb8(32, 32, &data).unwrap();
        let ct = ColorTransform::jpeg();
        let k = CompressionKernels::ones();
        let out = decode_pipeline(&encode_pipeline(&img, &ct, &k).unwrap(), &ct, &k);
        // only rounding and chroma subsampling lose information
        assert!(psnr(&img, &out).unwrap() > 35.0);
    }

    #[test]
    fn padding_replicates_edges() {
        let img = ImageRgb::from_rgb8(17, 16, &vec![9u8; 17 * 16 * 3]).unwrap();
        let p = pad_to_multiple(&img, 16);
        assert_eq!((p.width(), p.height()), (32, 16));
        assert!(p.planar().iter().all(|&v| v == 9.0));
    }
}
