//! Invariant checks shared by the property and acceptance targets.

use qtune_core::dataset::SyntheticGratings;
use qtune_core::entropy::{
    decode_blocks, encode_blocks, size_category, BitReader, BitWriter, BlockSymbols, HuffmanCodec, HuffmanTable,
    SymbolCounts, ZIGZAG,
};
use qtune_core::jpeg::{encode_pipeline, Channel, ColorTransform, CompressionKernels, ImageRgb};
use qtune_core::metrics::{psnr, ssim};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = Vec<(Channel, Vec<[i32; 64]>)>;

/// Sparse blocks with geometric-ish magnitudes; DC stays within ±1023 so DPCM fits in 11 bits.
pub fn random_stream(rng: &mut ChaCha8Rng) -> Stream {
    let parts = rng.gen_range(1..=3);
    (0..parts)
        .map(|_| {
            let ch = Channel::ALL[rng.gen_range(0..3)];
            let n = rng.gen_range(1..=6);
            let density = rng.gen_range(0.0..0.6);
            let blocks = (0..n)
                .map(|_| {
                    let mut b = [0i32; 64];
                    b[0] = rng.gen_range(-1023..=1023);
                    for z in 1..64 {
                        if rng.gen_bool(density) {
                            let size = rng.gen_range(1..=11u32);
                            let mag = rng.gen_range(1 << (size - 1)..=((1 << size) - 1).min(2047));
                            b[ZIGZAG[z]] = if rng.gen_bool(0.5) { mag } else { -mag };
                        }
                    }
                    b
                })
                .collect();
            (ch, blocks)
        })
        .collect()
}

pub fn symbols(stream: &Stream) -> Vec<(Channel, Vec<BlockSymbols>)> {
    stream.iter().map(|(c, b)| (*c, encode_blocks(b))).collect()
}

pub fn fit(syms: &[(Channel, Vec<BlockSymbols>)]) -> HuffmanCodec {
    let mut counts = SymbolCounts::default();
    for (c, s) in syms {
        counts.add_blocks(*c, s);
    }
    HuffmanCodec::from_counts(&counts).unwrap()
}

pub fn table_ok(t: &HuffmanTable) -> Result<(), String> {
    if !t.is_prefix_free() {
        return Err("table is not prefix-free".into());
    }
    if t.kraft_sum() > 1.0 + 1e-12 {
        return Err(format!("Kraft sum {}", t.kraft_sum()));
    }
    Ok(())
}

pub fn counted_bits(codec: &HuffmanCodec, syms: &[(Channel, Vec<BlockSymbols>)]) -> u64 {
    syms.iter().map(|(c, s)| codec.channel_bits(*c, s).total).sum()
}

/// Writes `stream` with `codec`, reads it back and compares coefficients and bit counts.
pub fn round_trip(codec: &HuffmanCodec, stream: &Stream) -> Result<(), String> {
    let syms = symbols(stream);
    let mut w = BitWriter::new();
    for (c, s) in &syms {
        codec.write_blocks(*c, s, &mut w);
    }
    let n = w.bit_len();
    if n != counted_bits(codec, &syms) {
        return Err(format!("wrote {n} bits, counted {}", counted_bits(codec, &syms)));
    }
    let bytes = w.finish();
    let mut r = BitReader::new(&bytes, n);
    for (c, blocks) in stream {
        let read = codec.read_blocks(*c, blocks.len(), &mut r).map_err(|e| e.to_string())?;
        let back = decode_blocks(&read).map_err(|e| e.to_string())?;
        if &back != blocks {
            return Err(format!("{c:?} blocks differ after round trip"));
        }
    }
    if r.remaining() != 0 {
        return Err(format!("{} bits left over", r.remaining()));
    }
    Ok(())
}

/// Round trip under fitted, foreign-fitted (escape path) and standard tables,
/// table validity, and fitted ≤ standard on the fitting stream.
pub fn entropy_case(stream: &Stream, other: &Stream) -> Result<(), String> {
    let syms = symbols(stream);
    let fitted = fit(&syms);
    let foreign = fit(&symbols(other));
    let standard = HuffmanCodec::standard();
    for codec in [&fitted, &foreign, &standard] {
        for t in codec.tables() {
            table_ok(t)?;
        }
        round_trip(codec, stream)?;
    }
    let (f, s) = (counted_bits(&fitted, &syms), counted_bits(&standard, &syms));
    if f > s {
        return Err(format!("fitted tables cost {f} bits, standard {s}"));
    }
    Ok(())
}

pub fn entropy_suite(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = random_stream(&mut rng);
    for i in 0..cases {
        let s = random_stream(&mut rng);
        entropy_case(&s, &prev).map_err(|e| format!("stream {i}: {e}"))?;
        prev = s;
    }
    Ok(())
}

/// Quantized size categories per channel, block and position.
pub fn categories(img: &ImageRgb, kernels: &CompressionKernels) -> Vec<u8> {
    let enc = encode_pipeline(img, &ColorTransform::jpeg(), kernels).unwrap();
    enc.grids.iter().flat_map(|g| g.to_ints()).flat_map(|b| b.map(size_category)).collect()
}

/// Counts positions whose category grows when every kernel entry is multiplied by `alpha`.
pub fn shrink_violations(img: &ImageRgb, kernels: &CompressionKernels, alpha: f64) -> usize {
    let a = categories(img, kernels);
    let b = categories(img, &kernels.scaled(alpha));
    a.iter().zip(&b).filter(|(x, y)| y > x).count()
}

pub fn monotonicity_images(n: usize, seed: u64) -> Vec<ImageRgb> {
    SyntheticGratings::new(20, 32, seed).unwrap().generate(n, 0).unwrap().images
}

pub fn monotonicity_kernels(seed: u64) -> Vec<CompressionKernels> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = CompressionKernels::zeros();
    for k in &mut random.q {
        k.iter_mut().for_each(|v| *v = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.01..2.0) });
    }
    vec![CompressionKernels::ones(), CompressionKernels::standard(50.0).unwrap(), random]
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageRgb {
    let rgb: Vec<u8> = (0..3 * w * h).map(|_| rng.gen()).collect();
    ImageRgb::from_rgb8(w, h, &rgb).unwrap()
}

/// A random image paired with an independent, inverted, noisy or flat partner.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (ImageRgb, ImageRgb) {
    let (w, h) = (rng.gen_range(16..48), rng.gen_range(16..48));
    let a = random_image(rng, w, h);
    let b = match rng.gen_range(0..4) {
        0 => random_image(rng, w, h),
        1 => {
            // negated contrast drives SSIM towards its lower end
            let inv: Vec<u8> = a.to_rgb8().iter().map(|v| 255 - v).collect();
            ImageRgb::from_rgb8(w, h, &inv).unwrap()
        }
        2 => {
            let sigma = rng.gen_range(1.0..40.0);
            let noisy: Vec<u8> = a
                .to_rgb8()
                .iter()
                .map(|&v| (v as f64 + rng.gen_range(-sigma..sigma)).round().clamp(0.0, 255.0) as u8)
                .collect();
            ImageRgb::from_rgb8(w, h, &noisy).unwrap()
        }
        _ => ImageRgb::filled(w, h, [rng.gen_range(0.0..255.0); 3]),
    };
    (a, b)
}

pub fn metric_case(a: &ImageRgb, b: &ImageRgb) -> Result<(), String> {
    let s = ssim(a, b).unwrap();
    if !(-1.0..=1.0).contains(&s) {
        return Err(format!("SSIM {s} out of range"));
    }
    let s_rev = ssim(b, a).unwrap();
    if (s - s_rev).abs() > 1e-12 {
        return Err(format!("SSIM not symmetric: {s} vs {s_rev}"));
    }
    let self_s = ssim(a, a).unwrap();
    if (self_s - 1.0).abs() > 1e-12 {
        return Err(format!("SSIM(a, a) = {self_s}"));
    }
    if psnr(a, a).unwrap() != f64::INFINITY {
        return Err("PSNR(a, a) is finite".into());
    }
    let (p, p_rev) = (psnr(a, b).unwrap(), psnr(b, a).unwrap());
    if p != p_rev {
        return Err(format!("PSNR not symmetric: {p} vs {p_rev}"));
    }
    if a.planar() != b.planar() && !(p.is_finite() && p >= 0.0) {
        return Err(format!("PSNR {p} for distinct 8-bit images"));
    }
    Ok(())
}

pub fn metric_suite(pairs: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let (a, b) = random_pair(&mut rng);
        metric_case(&a, &b).map_err(|e| format!("pair {i}: {e}"))?;
    }
    Ok(())
}
