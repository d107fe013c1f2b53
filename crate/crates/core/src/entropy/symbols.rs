use crate::error::{Error, Result};
use crate::jpeg::BLOCK_AREA;

/// Zigzag scan position → row-major index.
pub const ZIGZAG: [usize; BLOCK_AREA] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, //
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21, 28, //
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, //
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

pub const EOB: u8 = 0x00;
pub const ZRL: u8 = 0xF0;
/// Largest magnitude representable in a size category (category 11).
pub const MAX_MAGNITUDE: i32 = 2047;

pub fn zigzag_scan(block: &[i32; BLOCK_AREA]) -> [i32; BLOCK_AREA] {
    ZIGZAG.map(|i| block[i])
}

pub fn zigzag_unscan(scan: &[i32; BLOCK_AREA]) -> [i32; BLOCK_AREA] {
    let mut out = [0; BLOCK_AREA];
    for (pos, &i) in ZIGZAG.iter().enumerate() {
        out[i] = scan[pos];
    }
    out
}

/// DC DPCM: first value raw, then successive differences.
pub fn dc_differential(dcs: &[i32]) -> Vec<i32> {
    let mut prev = 0;
    dcs.iter()
        .map(|&d| {
            let diff = d - prev;
            prev = d;
            diff
        })
        .collect()
}

pub fn dc_integrate(diffs: &[i32]) -> Vec<i32> {
    let mut acc = 0;
    diffs.iter().map(|&d| {
        acc += d;
        acc
    })
    .collect()
}

/// Clamps into the codable range, warning when that loses information.
pub fn clamp_magnitude(v: i32) -> i32 {
    if v.abs() > MAX_MAGNITUDE {
        log::warn!("coefficient {v} exceeds the codable range; clamped to ±{MAX_MAGNITUDE}");
        v.clamp(-MAX_MAGNITUDE, MAX_MAGNITUDE)
    } else {
        v
    }
}

/// Magnitude category: 0 for 0, else the bit length of `|v|`.
pub fn size_category(v: i32) -> u8 {
    let m = clamp_magnitude(v).unsigned_abs();
    (u32::BITS - m.leading_zeros()) as u8
}

/// Amplitude bits of `v` in its category; negatives use one's complement.
pub fn amplitude_bits(v: i32, size: u8) -> u16 {
    if v >= 0 {
        v as u16
    } else {
        ((v - 1) & ((1 << size) - 1)) as u16
    }
}

pub fn decode_amplitude(bits: u16, size: u8) -> i32 {
    if size == 0 {
        return 0;
    }
    let b = bits as i32;
    if b >> (size - 1) == 1 {
        b
    } else {
        b - (1 << size) + 1
    }
}

/// One Huffman-coded symbol plus its trailing amplitude bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub symbol: u8,
    pub size: u8,
    pub bits: u16,
}

impl Token {
    fn value(v: i32) -> (u8, u16) {
        let v = clamp_magnitude(v);
        let s = size_category(v);
        (s, amplitude_bits(v, s))
    }

    pub fn dc(diff: i32) -> Self {
        let (size, bits) = Self::value(diff);
        Self { symbol: size, size, bits }
    }

    pub fn ac(run: u8, v: i32) -> Self {
        let (size, bits) = Self::value(v);
        Self { symbol: (run << 4) | size, size, bits }
    }

    pub const fn eob() -> Self {
        Self { symbol: EOB, size: 0, bits: 0 }
    }

    pub const fn zrl() -> Self {
        Self { symbol: ZRL, size: 0, bits: 0 }
    }

    pub fn run(&self) -> usize {
        (self.symbol >> 4) as usize
    }

    pub fn amplitude(&self) -> i32 {
        decode_amplitude(self.bits, self.size)
    }
}

/// Symbols of one 8×8 block: a DC difference and the AC run-length tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSymbols {
    pub dc: Token,
    pub ac: Vec<Token>,
}

/// Run-length tokens for the 63 AC coefficients in zigzag order.
pub fn ac_runlength_encode(ac: &[i32]) -> Vec<Token> {
    debug_assert_eq!(ac.len(), BLOCK_AREA - 1);
    let last = match ac.iter().rposition(|&v| v != 0) {
        Some(i) => i,
        None => return vec![Token::eob()],
    };
    let mut out = Vec::new();
    let mut run = 0u8;
    for &v in &ac[..=last] {
        if v == 0 {
            run += 1;
            if run == 16 {
                out.push(Token::zrl());
                run = 0;
            }
        } else {
            out.push(Token::ac(run, v));
            run = 0;
        }
    }
    if last < ac.len() - 1 {
        out.push(Token::eob());
    }
    out
}

/// Inverse of [`ac_runlength_encode`].
///
/// `block` labels errors; their `bit_offset` is the token index within the block.
pub fn ac_runlength_decode(tokens: &[Token], block: usize) -> Result<[i32; BLOCK_AREA - 1]> {
    let mut ac = [0; BLOCK_AREA - 1];
    let mut pos = 0;
    for (i, t) in tokens.iter().enumerate() {
        let malformed = |reason: String| Error::MalformedStream { block, bit_offset: i, reason };
        if t.symbol == EOB {
            if i + 1 != tokens.len() {
                return Err(malformed("tokens after EOB".into()));
            }
            return Ok(ac);
        }
        let skip = if t.symbol == ZRL { 16 } else { t.run() + 1 };
        if pos + skip > ac.len() {
            return Err(malformed(format!("run past coefficient 63 (at {pos}, +{skip})")));
        }
        if t.symbol != ZRL {
            if t.size == 0 {
                return Err(malformed(format!("symbol {:#04x} has zero size", t.symbol)));
            }
            ac[pos + skip - 1] = t.amplitude();
        }
        pos += skip;
    }
    if pos != ac.len() {
        return Err(Error::MalformedStream {
            block,
            bit_offset: tokens.len(),
            reason: format!("block ends at coefficient {pos} without EOB"),
        });
    }
    Ok(ac)
}

/// Zigzag, DC DPCM and AC run-length coding of one channel's blocks (row-major input).
pub fn encode_blocks(blocks: &[[i32; BLOCK_AREA]]) -> Vec<BlockSymbols> {
    let scans: Vec<[i32; BLOCK_AREA]> = blocks.iter().map(zigzag_scan).collect();
    let dcs: Vec<i32> = scans.iter().map(|s| clamp_magnitude(s[0])).collect();
    dc_differential(&dcs)
        .into_iter()
        .zip(&scans)
        .map(|(d, s)| BlockSymbols { dc: Token::dc(d), ac: ac_runlength_encode(&s[1..]) })
        .collect()
}

/// Inverse of [`encode_blocks`].
pub fn decode_blocks(symbols: &[BlockSymbols]) -> Result<Vec<[i32; BLOCK_AREA]>> {
    let diffs: Vec<i32> = symbols.iter().map(|b| b.dc.amplitude()).collect();
    let dcs = dc_integrate(&diffs);
    symbols
        .iter()
        .zip(dcs)
        .enumerate()
        .map(|(i, (b, dc))| {
            let ac = ac_runlength_decode(&b.ac, i)?;
            let mut scan = [0; BLOCK_AREA];
            scan[0] = dc;
            scan[1..].copy_from_slice(&ac);
            Ok(zigzag_unscan(&scan))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Walks the anti-diagonals, alternating direction.
    fn zigzag_oracle() -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..15usize {
            let mut diag: Vec<(usize, usize)> = (0..8).filter_map(|r| s.checked_sub(r).filter(|&c| c < 8).map(|c| (r, c))).collect();
            if s % 2 == 0 {
                diag.reverse();
            }
            out.extend(diag);
        }
        out
    }

    #[test]
    fn zigzag_matches_diagonal_walk() {
        let oracle = zigzag_oracle();
        for (pos, &(r, c)) in oracle.iter().enumerate() {
            assert_eq!(ZIGZAG[pos], r * 8 + c, "position {pos}");
        }
        assert_eq!(ZIGZAG[1], 1);
        assert_eq!(ZIGZAG[2], 8);
    }

    #[test]
    fn dc_examples() {
        assert_eq!(dc_differential(&[5, 5, 5]), vec![5, 0, 0]);
        assert_eq!(dc_differential(&[7]), vec![7]);
        assert_eq!(dc_differential(&[3, -2]), vec![3, -5]);
        assert_eq!(dc_integrate(&[3, -5]), vec![3, -2]);
    }

    #[test]
    fn categories_and_amplitudes() {
        assert_eq!(size_category(0), 0);
        assert_eq!(size_category(-1), 1);
        assert_eq!(amplitude_bits(-1, 1), 0);
        assert_eq!(size_category(5), 3);
        assert_eq!(amplitude_bits(5, 3), 0b101);
        assert_eq!(size_category(-5), 3);
        assert_eq!(amplitude_bits(-5, 3), 0b010);
        assert_eq!(size_category(2047), 11);
        assert_eq!(size_category(5000), 11);
        for v in -2047..=2047 {
            let s = size_category(v);
            assert_eq!(decode_amplitude(amplitude_bits(v, s), s), v);
        }
    }

    #[test]
    fn rle_examples() {
        assert_eq!(ac_runlength_encode(&[0; 63]), vec![Token::eob()]);

        let mut a = [0; 63];
        a[0] = 7;
        let t = ac_runlength_encode(&a);
        assert_eq!(t, vec![Token { symbol: 0x03, size: 3, bits: 7 }, Token::eob()]);

        let mut b = [0; 63];
        b[16] = 1;
        let t = ac_runlength_encode(&b);
        assert_eq!(t, vec![Token::zrl(), Token { symbol: 0x01, size: 1, bits: 1 }, Token::eob()]);
        assert_eq!(ac_runlength_decode(&t, 0).unwrap(), b);

        let mut c = [0; 63];
        c[62] = -3;
        let t = ac_runlength_encode(&c);
        assert_eq!(t.last().unwrap().symbol, 0xE2, "no EOB after a final nonzero");
        assert_eq!(ac_runlength_decode(&t, 0).unwrap(), c);
    }

    #[test]
    fn malformed_runs_are_reported() {
        let t = vec![Token::zrl(); 4];
        match ac_runlength_decode(&t, 7) {
            Err(Error::MalformedStream { block: 7, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(ac_runlength_decode(&[Token::ac(0, 1)], 0).is_err());
    }
}
