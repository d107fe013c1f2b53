use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symbols `0..=255` are JPEG DC categories or AC `(run << 4) | size` bytes.
pub const ALPHABET: usize = 257;
/// Reserved escape for symbols without a code; followed by a 24-bit literal.
pub const ESC: usize = 256;
pub const ESC_LITERAL_BITS: u8 = 24;
pub const MAX_CODE_LEN: usize = 16;

/// Code lengths by the Annex K.2 procedure, limited to 16 bits by the K.3 adjustment.
///
/// Symbols with zero frequency get length 0. Ties between equal frequencies
/// merge the lower ordinal first. A lone symbol gets length 1.
pub fn code_lengths(freqs: &[u64]) -> Vec<u8> {
    let n = freqs.len();
    let mut freq = freqs.to_vec();
    let mut size = vec![0usize; n];
    let mut others: Vec<Option<usize>> = vec![None; n];

    let least = |freq: &[u64], skip: Option<usize>| {
        let mut best: Option<usize> = None;
        for (i, &f) in freq.iter().enumerate() {
            if f > 0 && Some(i) != skip && best.map_or(true, |b| f < freq[b]) {
                best = Some(i);
            }
        }
        best
    };

    loop {
        let Some(mut v1) = least(&freq, None) else { break };
        let Some(mut v2) = least(&freq, Some(v1)) else { break };
        freq[v1] += freq[v2];
        freq[v2] = 0;
        size[v1] += 1;
        while let Some(o) = others[v1] {
            v1 = o;
            size[v1] += 1;
        }
        others[v1] = Some(v2);
        size[v2] += 1;
        while let Some(o) = others[v2] {
            v2 = o;
            size[v2] += 1;
        }
    }

    let used: Vec<usize> = (0..n).filter(|&i| freqs[i] > 0).collect();
    if used.len() == 1 {
        let mut out = vec![0u8; n];
        out[used[0]] = 1;
        return out;
    }

    let max = size.iter().copied().max().unwrap_or(0);
    let mut bits = vec![0usize; max.max(MAX_CODE_LEN) + 1];
    for &s in &size {
        if s > 0 {
            bits[s] += 1;
        }
    }
    let mut i = bits.len() - 1;
    while i > MAX_CODE_LEN {
        if bits[i] > 0 {
            let mut j = i - 2;
            while bits[j] == 0 {
                j -= 1;
            }
            bits[i] -= 2;
            bits[i - 1] += 1;
            bits[j + 1] += 2;
            bits[j] -= 1;
        } else {
            i -= 1;
        }
    }

    // hand the adjusted lengths out in order of original code size, then ordinal
    let mut order = used;
    order.sort_by_key(|&s| (size[s], s));
    let mut out = vec![0u8; n];
    let mut it = order.into_iter();
    for (len, &count) in bits.iter().enumerate().take(MAX_CODE_LEN + 1) {
        for _ in 0..count {
            out[it.next().expect("bit counts match symbol count")] = len as u8;
        }
    }
    out
}

/// Canonical prefix code over the 257-symbol alphabet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct HuffmanTable {
    lengths: Vec<u8>,
    codes: Vec<u16>,
    /// Symbols sorted by (length, ordinal), i.e. canonical code order.
    sorted: Vec<u16>,
    /// Per length: first code value and index of its first symbol in `sorted`.
    first_code: [u32; MAX_CODE_LEN + 1],
    first_index: [usize; MAX_CODE_LEN + 1],
    count: [usize; MAX_CODE_LEN + 1],
}

impl HuffmanTable {
    /// Assigns canonical codes; lengths must satisfy Kraft and be at most 16.
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        if lengths.len() != ALPHABET {
            return Err(Error::InvalidArgument(format!("{} code lengths, expected {ALPHABET}", lengths.len())));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l as usize > MAX_CODE_LEN) {
            return Err(Error::InvalidArgument(format!("code length {l} exceeds {MAX_CODE_LEN}")));
        }
        let kraft: u64 = lengths.iter().filter(|&&l| l > 0).map(|&l| 1u64 << (MAX_CODE_LEN - l as usize)).sum();
        if kraft > 1 << MAX_CODE_LEN {
            return Err(Error::InvalidArgument("code lengths violate the Kraft inequality".into()));
        }
        let mut sorted: Vec<u16> = (0..ALPHABET as u16).filter(|&s| lengths[s as usize] > 0).collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));

        let mut codes = vec![0u16; ALPHABET];
        let mut first_code = [0u32; MAX_CODE_LEN + 1];
        let mut first_index = [0usize; MAX_CODE_LEN + 1];
        let mut count = [0usize; MAX_CODE_LEN + 1];
        let mut code = 0u32;
        let mut idx = 0;
        for len in 1..=MAX_CODE_LEN {
            first_code[len] = code;
            first_index[len] = idx;
            while idx < sorted.len() && lengths[sorted[idx] as usize] as usize == len {
                codes[sorted[idx] as usize] = code as u16;
                code += 1;
                idx += 1;
            }
            count[len] = idx - first_index[len];
            code <<= 1;
        }
        Ok(Self { lengths, codes, sorted, first_code, first_index, count })
    }

    /// Optimal table for the given frequencies (length 257).
    pub fn from_counts(freqs: &[u64]) -> Result<Self> {
        if freqs.len() != ALPHABET {
            return Err(Error::InvalidArgument(format!("{} frequencies, expected {ALPHABET}", freqs.len())));
        }
        Self::from_lengths(code_lengths(freqs))
    }

    /// A JPEG `BITS`/`HUFFVAL` table, with the escape placed on the first unused code.
    pub fn from_jpeg_spec(bits: &[u8; MAX_CODE_LEN], values: &[u8]) -> Result<Self> {
        let mut lengths = vec![0u8; ALPHABET];
        let mut vals = values.iter();
        let mut longest = 0;
        for (i, &n) in bits.iter().enumerate() {
            for _ in 0..n {
                let v = vals.next().ok_or_else(|| Error::InvalidArgument("BITS exceed HUFFVAL".into()))?;
                lengths[*v as usize] = i as u8 + 1;
                longest = i + 1;
            }
        }
        // the escape takes the all-ones code JPEG leaves unused at the longest length
        lengths[ESC] = longest as u8;
        let t = Self::from_lengths(lengths)?;
        // canonical order sorts by symbol within a length; keep HUFFVAL order instead
        let mut codes = t.codes.clone();
        let mut code = 0u32;
        let mut vals = values.iter();
        for (i, &n) in bits.iter().enumerate() {
            for _ in 0..n {
                codes[*vals.next().expect("checked above") as usize] = code as u16;
                code += 1;
            }
            if i + 1 == longest {
                codes[ESC] = code as u16;
            }
            code <<= 1;
        }
        Ok(Self::with_codes(t.lengths, codes))
    }

    fn with_codes(lengths: Vec<u8>, codes: Vec<u16>) -> Self {
        let mut t = Self::from_lengths(lengths).expect("validated lengths");
        t.codes = codes;
        // rebuild the decode order from the explicit codes
        let mut sorted: Vec<u16> = (0..ALPHABET as u16).filter(|&s| t.lengths[s as usize] > 0).collect();
        sorted.sort_by_key(|&s| (t.lengths[s as usize], t.codes[s as usize]));
        t.sorted = sorted;
        t
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    /// `(code, length)` or `None` when the symbol has no code.
    pub fn code(&self, symbol: usize) -> Option<(u16, u8)> {
        match self.lengths.get(symbol) {
            Some(&l) if l > 0 => Some((self.codes[symbol], l)),
            _ => None,
        }
    }

    pub fn kraft_sum(&self) -> f64 {
        self.lengths.iter().filter(|&&l| l > 0).map(|&l| 0.5f64.powi(l as i32)).sum()
    }

    /// Pairwise check that no codeword prefixes another.
    pub fn is_prefix_free(&self) -> bool {
        let words: Vec<(u16, u8)> = (0..ALPHABET).filter_map(|s| self.code(s)).collect();
        for (i, &(ca, la)) in words.iter().enumerate() {
            for &(cb, lb) in &words[i + 1..] {
                let l = la.min(lb);
                if ca >> (la - l) == cb >> (lb - l) {
                    return false;
                }
            }
        }
        true
    }

    /// Reads one symbol; `None` when the bits match no codeword or run out.
    pub fn decode(&self, r: &mut BitReader<'_>) -> Option<usize> {
        let mut code = 0u32;
        for len in 1..=MAX_CODE_LEN {
            code = (code << 1) | r.read_bit()? as u32;
            let n = self.count[len];
            if n > 0 && code >= self.first_code[len] && code < self.first_code[len] + n as u32 {
                let s = self.sorted[self.first_index[len] + (code - self.first_code[len]) as usize];
                // explicit (non-canonical) code layouts still keep codes contiguous per length
                debug_assert_eq!(self.codes[s as usize] as u32, code);
                return Some(s as usize);
            }
        }
        None
    }
}

impl TryFrom<Vec<u8>> for HuffmanTable {
    type Error = Error;

    fn try_from(lengths: Vec<u8>) -> Result<Self> {
        Self::from_lengths(lengths)
    }
}

impl From<HuffmanTable> for Vec<u8> {
    fn from(t: HuffmanTable) -> Self {
        t.lengths
    }
}

/// MSB-first bit sink.
#[derive(Clone, Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    pending: u32,
    total: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, value: u32, len: u8) {
        debug_assert!(len <= 32);
        if len == 0 {
            return;
        }
        let v = value as u64 & ((1u64 << len) - 1);
        self.acc = (self.acc << len) | v;
        self.pending += len as u32;
        self.total += len as u64;
        while self.pending >= 8 {
            self.pending -= 8;
            self.bytes.push((self.acc >> self.pending) as u8);
        }
        self.acc &= (1u64 << self.pending) - 1;
    }

    pub fn bit_len(&self) -> u64 {
        self.total
    }

    /// Bytes with the final partial byte padded with 1-bits.
    pub fn finish(mut self) -> Vec<u8> {
        if self.pending > 0 {
            let pad = 8 - self.pending;
            let byte = (self.acc << pad) | ((1u64 << pad) - 1);
            self.bytes.push(byte as u8);
        }
        self.bytes
    }
}

/// MSB-first bit source.
#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    limit: usize,
}

impl<'a> BitReader<'a> {
    /// Reads at most `bit_len` bits from `data`.
    pub fn new(data: &'a [u8], bit_len: u64) -> Self {
        Self { data, pos: 0, limit: (bit_len as usize).min(data.len() * 8) }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.pos
    }

    pub fn read_bit(&mut self) -> Option<u8> {
        if self.pos >= self.limit {
            return None;
        }
        let b = (self.data[self.pos / 8] >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Some(b)
    }

    pub fn read(&mut self, len: u8) -> Option<u32> {
        if self.remaining() < len as usize {
            return None;
        }
        let mut v = 0u32;
        for _ in 0..len {
            v = (v << 1) | self.read_bit()? as u32;
        }
        Some(v)
    }
}

/// Annex K.3 default tables as (`BITS`, `HUFFVAL`).
pub mod annex_k {
    pub const DC_LUMA_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    pub const DC_CHROMA_BITS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
    pub const DC_VALUES: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

    pub const AC_LUMA_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D];
    pub const AC_LUMA_VALUES: [u8; 162] = [
        0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07, //
        0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0, //
        0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28, //
        0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, //
        0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, //
        0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, //
        0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7, //
        0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, //
        0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2, //
        0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, //
        0xF9, 0xFA,
    ];

    pub const AC_CHROMA_BITS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
    pub const AC_CHROMA_VALUES: [u8; 162] = [
        0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71, //
        0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0, //
        0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26, //
        0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, //
        0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, //
        0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87, //
        0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, //
        0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, //
        0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, //
        0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, //
        0xF9, 0xFA,
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn padded(freqs: &[(usize, u64)]) -> Vec<u64> {
        let mut f = vec![0; ALPHABET];
        for &(s, n) in freqs {
            f[s] = n;
        }
        f
    }

    /// Exhaustive optimal prefix-code cost for tiny alphabets: try every length
    /// vector with Kraft ≤ 1.
    fn brute_force_cost(freqs: &[u64]) -> u64 {
        fn go(freqs: &[u64], i: usize, kraft: f64, cost: u64, best: &mut u64) {
            if kraft > 1.0 + 1e-12 {
                return;
            }
            if i == freqs.len() {
                *best = (*best).min(cost);
                return;
            }
            for l in 1..=freqs.len() as u32 {
                go(freqs, i + 1, kraft + 0.5f64.powi(l as i32), cost + freqs[i] * l as u64, best);
            }
        }
        let mut best = u64::MAX;
        go(freqs, 0, 0.0, 0, &mut best);
        best
    }

    #[test]
    fn three_symbol_example() {
        let l = code_lengths(&[5, 2, 1]);
        assert_eq!(l, vec![1, 2, 2]);
        let t = HuffmanTable::from_counts(&padded(&[(0, 5), (1, 2), (2, 1)])).unwrap();
        assert_eq!(t.kraft_sum(), 1.0);
        assert!(t.is_prefix_free());
    }

    #[test]
    fn single_symbol_gets_one_bit() {
        assert_eq!(code_lengths(&[0, 9, 0]), vec![0, 1, 0]);
    }

    #[test]
    fn matches_brute_force_on_small_alphabets() {
        let cases: [&[u64]; 5] = [&[1, 1, 1, 1], &[10, 1, 1, 1, 1], &[3, 3, 2, 2, 1], &[40, 30, 20, 10, 5, 1], &[7, 7, 7]];
        for f in cases {
            let l = code_lengths(f);
            let cost: u64 = f.iter().zip(&l).map(|(&n, &l)| n * l as u64).sum();
            assert_eq!(cost, brute_force_cost(f), "{f:?}");
        }
    }

    #[test]
    fn length_limit_holds_for_fibonacci_weights() {
        let mut f = vec![1u64, 1];
        while f.len() < 30 {
            let n = f[f.len() - 1] + f[f.len() - 2];
            f.push(n);
        }
        let l = code_lengths(&f);
        assert!(l.iter().all(|&l| (1..=16).contains(&l)));
        let kraft: f64 = l.iter().map(|&l| 0.5f64.powi(l as i32)).sum();
        assert!(kraft <= 1.0);
    }

    #[test]
    fn annex_k_tables_decode_their_own_codes() {
        use annex_k::*;
        let t = HuffmanTable::from_jpeg_spec(&DC_LUMA_BITS, &DC_VALUES).unwrap();
        assert_eq!(t.code(0), Some((0b00, 2)));
        assert_eq!(t.code(1), Some((0b010, 3)));
        assert_eq!(t.code(11), Some((0b1_1111_1110, 9)));
        assert_eq!(t.code(ESC), Some((0b1_1111_1111, 9)));
        let ac = HuffmanTable::from_jpeg_spec(&AC_LUMA_BITS, &AC_LUMA_VALUES).unwrap();
        assert_eq!(ac.code(0x01), Some((0b00, 2)));
        assert_eq!(ac.code(0x00), Some((0b1010, 4)));
        assert_eq!(ac.code(0xF0), Some((0b111_1111_1001, 11)));
        for table in [t, ac] {
            assert!(table.is_prefix_free());
            let mut w = BitWriter::new();
            let syms: Vec<usize> = (0..ALPHABET).filter(|&s| table.code(s).is_some()).collect();
            for &s in &syms {
                let (c, l) = table.code(s).unwrap();
                w.write(c as u32, l);
            }
            let n = w.bit_len();
            let bytes = w.finish();
            let mut r = BitReader::new(&bytes, n);
            for &s in &syms {
                assert_eq!(table.decode(&mut r), Some(s));
            }
        }
    }

    #[test]
    fn bit_io_round_trip() {
        let mut w = BitWriter::new();
        w.write(0b101, 3);
        w.write(0xABCD, 16);
        w.write(0, 0);
        w.write(1, 1);
        assert_eq!(w.bit_len(), 20);
        let bytes = w.finish();
        assert_eq!(bytes.len(), 3);
        let mut r = BitReader::new(&bytes, 20);
        assert_eq!(r.read(3), Some(0b101));
        assert_eq!(r.read(16), Some(0xABCD));
        assert_eq!(r.read(1), Some(1));
        assert_eq!(r.read(1), None);
    }
}
