//! Our codec at standard tables next to an independent baseline JPEG implementation.

use std::path::PathBuf;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use qtune_core::jpeg::{decode_pipeline, encode_pipeline, ColorTransform, CompressionKernels, ImageRgb};
use qtune_core::metrics::psnr;

pub const FIXTURES: [&str; 5] = ["astronaut.png", "chelsea.png", "coffee.png", "motorcycle_left.png", "ihc.png"];
pub const QUALITIES: [f64; 5] = [12.5, 25.0, 50.0, 80.0, 100.0];

pub fn fixture(name: &str) -> ImageRgb {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name);
    ImageRgb::load(&p).unwrap()
}

pub fn ours(img: &ImageRgb, quality: f64) -> ImageRgb {
    let k = CompressionKernels::standard(quality).unwrap();
    let ct = ColorTransform::jpeg();
    let dec = decode_pipeline(&encode_pipeline(img, &ct, &k).unwrap(), &ct, &k);
    // a real decoder emits 8-bit samples
    ImageRgb::from_rgb8(dec.width(), dec.height(), &dec.to_rgb8()).unwrap()
}

pub fn reference(img: &ImageRgb, quality: u8) -> ImageRgb {
    let mut bytes = Vec::new();
    let mut enc = Encoder::new(&mut bytes, quality);
    enc.set_sampling_factor(SamplingFactor::R_4_2_0);
    enc.encode(&img.to_rgb8(), img.width() as u16, img.height() as u16, ColorType::Rgb).unwrap();
    let mut dec = jpeg_decoder::Decoder::new(bytes.as_slice());
    let px = dec.decode().unwrap();
    let info = dec.info().unwrap();
    assert_eq!((info.width as usize, info.height as usize), (img.width(), img.height()));
    ImageRgb::from_rgb8(img.width(), img.height(), &px).unwrap()
}

/// (ours, reference) PSNR at quality 50.
pub fn psnr_pair(img: &ImageRgb) -> (f64, f64) {
    (psnr(img, &ours(img, 50.0)).unwrap(), psnr(img, &reference(img, 50)).unwrap())
}

pub fn psnr_over_qualities(img: &ImageRgb) -> Vec<f64> {
    QUALITIES.iter().map(|&q| psnr(img, &ours(img, q)).unwrap()).collect()
}
