use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::huffman::{annex_k, BitReader, BitWriter, HuffmanTable, ALPHABET, ESC, ESC_LITERAL_BITS};
use super::symbols::{decode_blocks, encode_blocks, BlockSymbols, Token, EOB, ZRL};
use crate::error::{Error, Result};
use crate::jpeg::{encode_pipeline, Channel, ColorTransform, CompressionKernels, EncodedImage, ImageRgb, BLOCK_AREA};

pub const BITS_PER_KB: f64 = 8192.0;

/// Symbol frequencies for the four tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolCounts {
    /// Indexed `[luma, chroma]`.
    pub dc: [Vec<u64>; 2],
    pub ac: [Vec<u64>; 2],
}

impl Default for SymbolCounts {
    fn default() -> Self {
        let z = || vec![0u64; ALPHABET];
        Self { dc: [z(), z()], ac: [z(), z()] }
    }
}

fn class(c: Channel) -> usize {
    if c.is_luma() {
        0
    } else {
        1
    }
}

impl SymbolCounts {
    pub fn add_blocks(&mut self, channel: Channel, blocks: &[BlockSymbols]) {
        let k = class(channel);
        for b in blocks {
            self.dc[k][b.dc.symbol as usize] += 1;
            for t in &b.ac {
                self.ac[k][t.symbol as usize] += 1;
            }
        }
    }

    pub fn add_image(&mut self, img: &EncodedImage) {
        for c in Channel::ALL {
            self.add_blocks(c, &encode_blocks(&img.grids[c.index()].to_ints()));
        }
    }

    pub fn merge(&mut self, other: &SymbolCounts) {
        for (a, b) in self.dc.iter_mut().chain(self.ac.iter_mut()).zip(other.dc.iter().chain(other.ac.iter())) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// DC and AC tables for luma and chroma.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HuffmanCodec {
    pub dc_luma: HuffmanTable,
    pub dc_chroma: HuffmanTable,
    pub ac_luma: HuffmanTable,
    pub ac_chroma: HuffmanTable,
}

/// How a channel's blocks turn into bits, tallied per zigzag position.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChannelBits {
    pub total: u64,
    pub per_position: Vec<u64>,
    pub escapes: u64,
}

impl HuffmanCodec {
    /// Fitted tables; each table also codes the escape symbol (count 1).
    pub fn from_counts(counts: &SymbolCounts) -> Result<Self> {
        let fit = |f: &Vec<u64>| {
            let mut f = f.clone();
            f[ESC] = 1;
            HuffmanTable::from_counts(&f)
        };
        Ok(Self {
            dc_luma: fit(&counts.dc[0])?,
            dc_chroma: fit(&counts.dc[1])?,
            ac_luma: fit(&counts.ac[0])?,
            ac_chroma: fit(&counts.ac[1])?,
        })
    }

    /// The Annex K example tables.
    pub fn standard() -> Self {
        use annex_k::*;
        let t = |b, v: &[u8]| HuffmanTable::from_jpeg_spec(b, v).expect("Annex K tables are valid");
        Self {
            dc_luma: t(&DC_LUMA_BITS, &DC_VALUES),
            dc_chroma: t(&DC_CHROMA_BITS, &DC_VALUES),
            ac_luma: t(&AC_LUMA_BITS, &AC_LUMA_VALUES),
            ac_chroma: t(&AC_CHROMA_BITS, &AC_CHROMA_VALUES),
        }
    }

    pub fn tables(&self) -> [&HuffmanTable; 4] {
        [&self.dc_luma, &self.dc_chroma, &self.ac_luma, &self.ac_chroma]
    }

    fn pick(&self, channel: Channel) -> (&HuffmanTable, &HuffmanTable) {
        if channel.is_luma() {
            (&self.dc_luma, &self.ac_luma)
        } else {
            (&self.dc_chroma, &self.ac_chroma)
        }
    }

    /// Bits for one token: its codeword plus amplitude, or escape + 24-bit literal.
    fn token_cost(table: &HuffmanTable, t: &Token) -> (u64, bool) {
        match table.code(t.symbol as usize) {
            Some((_, l)) => (l as u64 + t.size as u64, false),
            None => {
                let (_, l) = table.code(ESC).expect("tables always code the escape");
                (l as u64 + ESC_LITERAL_BITS as u64, true)
            }
        }
    }

    /// Counts bits without producing them.
    pub fn channel_bits(&self, channel: Channel, blocks: &[BlockSymbols]) -> ChannelBits {
        let (dc, ac) = self.pick(channel);
        let mut out = ChannelBits { per_position: vec![0; BLOCK_AREA], ..Default::default() };
        for b in blocks {
            let (bits, esc) = Self::token_cost(dc, &b.dc);
            out.per_position[0] += bits;
            out.escapes += esc as u64;
            let mut pos = 0;
            for t in &b.ac {
                let (bits, esc) = Self::token_cost(ac, t);
                out.escapes += esc as u64;
                // attribute to the last coefficient the token covers; EOB to the first trailing zero
                pos = match t.symbol {
                    EOB => pos + 1,
                    ZRL => pos + 16,
                    _ => pos + t.run() + 1,
                };
                out.per_position[pos.min(BLOCK_AREA - 1)] += bits;
            }
        }
        out.total = out.per_position.iter().sum();
        out
    }

    fn write_token(table: &HuffmanTable, t: &Token, w: &mut BitWriter) {
        match table.code(t.symbol as usize) {
            Some((c, l)) => {
                w.write(c as u32, l);
                w.write(t.bits as u32, t.size);
            }
            None => {
                let (c, l) = table.code(ESC).expect("tables always code the escape");
                w.write(c as u32, l);
                w.write(((t.symbol as u32) << 16) | t.bits as u32, ESC_LITERAL_BITS);
            }
        }
    }

    pub fn write_blocks(&self, channel: Channel, blocks: &[BlockSymbols], w: &mut BitWriter) {
        let (dc, ac) = self.pick(channel);
        for b in blocks {
            Self::write_token(dc, &b.dc, w);
            for t in &b.ac {
                Self::write_token(ac, t, w);
            }
        }
    }

    fn read_token(table: &HuffmanTable, r: &mut BitReader<'_>, is_dc: bool) -> std::result::Result<Token, String> {
        let sym = table.decode(r).ok_or("no codeword matches")?;
        let (symbol, size, bits) = if sym == ESC {
            let lit = r.read(ESC_LITERAL_BITS).ok_or("truncated escape literal")?;
            let symbol = (lit >> 16) as u8;
            let size = if is_dc { symbol } else { symbol & 0x0F };
            (symbol, size, (lit & 0xFFFF) as u16)
        } else {
            let symbol = sym as u8;
            let size = if is_dc { symbol } else { symbol & 0x0F };
            (symbol, size, r.read(size).ok_or("truncated amplitude bits")? as u16)
        };
        if size > 11 || (bits as u32) >> size != 0 {
            return Err(format!("invalid size {size} for symbol {symbol:#04x}"));
        }
        Ok(Token { symbol, size, bits })
    }

    /// Reads `n_blocks` blocks of one channel.
    pub fn read_blocks(&self, channel: Channel, n_blocks: usize, r: &mut BitReader<'_>) -> Result<Vec<BlockSymbols>> {
        let (dc, ac) = self.pick(channel);
        let mut out = Vec::with_capacity(n_blocks);
        for block in 0..n_blocks {
            let fail = |bit_offset: usize, reason: String| Error::MalformedStream { block, bit_offset, reason };
            let start = r.position();
            let dct = Self::read_token(dc, r, true).map_err(|e| fail(start, e))?;
            let mut tokens = Vec::new();
            let mut pos = 0;
            while pos < BLOCK_AREA - 1 {
                let at = r.position();
                let t = Self::read_token(ac, r, false).map_err(|e| fail(at, e))?;
                tokens.push(t);
                match t.symbol {
                    EOB => break,
                    ZRL => pos += 16,
                    _ => pos += t.run() + 1,
                }
                if pos > BLOCK_AREA - 1 {
                    return Err(fail(at, format!("run past coefficient 63 (reached {pos})")));
                }
            }
            out.push(BlockSymbols { dc: dct, ac: tokens });
        }
        Ok(out)
    }

    /// Entropy-codes an image's three channels in Y, Cb, Cr order.
    pub fn encode_image(&self, img: &EncodedImage) -> (Vec<u8>, u64) {
        let mut w = BitWriter::new();
        for c in Channel::ALL {
            self.write_blocks(c, &encode_blocks(&img.grids[c.index()].to_ints()), &mut w);
        }
        let n = w.bit_len();
        (w.finish(), n)
    }

    /// Inverse of [`HuffmanCodec::encode_image`]; block counts come from `layout`.
    pub fn decode_image(&self, bytes: &[u8], bit_len: u64, layout: &EncodedImage) -> Result<[Vec<[i32; BLOCK_AREA]>; 3]> {
        let mut r = BitReader::new(bytes, bit_len);
        let mut out: [Vec<[i32; BLOCK_AREA]>; 3] = Default::default();
        for c in Channel::ALL {
            let syms = self.read_blocks(c, layout.grids[c.index()].len(), &mut r)?;
            out[c.index()] = decode_blocks(&syms)?;
        }
        Ok(out)
    }
}

/// Bits of one image, per channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRate {
    pub image_id: usize,
    pub bits: [u64; 3],
}

impl ImageRate {
    pub fn total(&self) -> u64 {
        self.bits.iter().sum()
    }
}

/// Payload sizes for a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RateReport {
    pub images: Vec<ImageRate>,
    /// Bits per channel and zigzag position, summed over the corpus.
    pub per_frequency: [Vec<u64>; 3],
    pub escapes: u64,
}

impl RateReport {
    pub fn total_bits(&self) -> u64 {
        self.images.iter().map(ImageRate::total).sum()
    }

    pub fn channel_bits(&self, c: Channel) -> u64 {
        self.images.iter().map(|i| i.bits[c.index()]).sum()
    }

    pub fn mean_kb(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.total_bits() as f64 / self.images.len() as f64 / BITS_PER_KB
    }

    pub fn median_kb(&self) -> f64 {
        let mut v: Vec<u64> = self.images.iter().map(ImageRate::total).collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_unstable();
        let n = v.len();
        let m = if n % 2 == 1 { v[n / 2] as f64 } else { (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0 };
        m / BITS_PER_KB
    }
}

/// Per-image bits of already-quantized images.
pub fn measure_encoded(images: &[EncodedImage], codec: &HuffmanCodec) -> Result<RateReport> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus("rate measurement needs at least one image".into()));
    }
    let mut report = RateReport { images: Vec::with_capacity(images.len()), per_frequency: Default::default(), escapes: 0 };
    for f in &mut report.per_frequency {
        *f = vec![0; BLOCK_AREA];
    }
    for (id, img) in images.iter().enumerate() {
        let mut bits = [0u64; 3];
        for c in Channel::ALL {
            let cb = codec.channel_bits(c, &encode_blocks(&img.grids[c.index()].to_ints()));
            bits[c.index()] = cb.total;
            report.escapes += cb.escapes;
            report.per_frequency[c.index()].iter_mut().zip(&cb.per_position).for_each(|(a, b)| *a += b);
        }
        report.images.push(ImageRate { image_id: id, bits });
    }
    if report.escapes > 0 {
        log::warn!("{} symbols had no code and were escape-coded", report.escapes);
    }
    Ok(report)
}

/// Quantizes `images` and measures them with `codec`.
pub fn measure_rate(
    images: &[ImageRgb],
    ct: &ColorTransform,
    kernels: &CompressionKernels,
    codec: &HuffmanCodec,
) -> Result<RateReport> {
    let enc = images.iter().map(|i| encode_pipeline(i, ct, kernels)).collect::<Result<Vec<_>>>()?;
    measure_encoded(&enc, codec)
}

/// Indices of a seeded sample without replacement, in ascending order; all indices when `size >= n`.
pub fn sample_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, size).into_vec();
    v.sort_unstable();
    v
}

/// Fits tables to already-quantized images.
pub fn build_from_encoded<'a>(images: impl IntoIterator<Item = &'a EncodedImage>) -> Result<HuffmanCodec> {
    let mut counts = SymbolCounts::default();
    let mut any = false;
    for img in images {
        counts.add_image(img);
        any = true;
    }
    if !any {
        return Err(Error::EmptyCorpus("no images to fit Huffman tables".into()));
    }
    HuffmanCodec::from_counts(&counts)
}

/// Fits tables to a seeded sample of `images` quantized with `kernels`.
pub fn build_huffman_tables(
    images: &[ImageRgb],
    ct: &ColorTransform,
    kernels: &CompressionKernels,
    sample_size: usize,
    seed: u64,
) -> Result<HuffmanCodec> {
    if images.is_empty() || sample_size == 0 {
        return Err(Error::EmptyCorpus("no images to fit Huffman tables".into()));
    }
    kernels.validate()?;
    let enc = sample_indices(images.len(), sample_size, seed)
        .into_iter()
        .map(|i| encode_pipeline(&images[i], ct, kernels))
        .collect::<Result<Vec<_>>>()?;
    build_from_encoded(&enc)
}
