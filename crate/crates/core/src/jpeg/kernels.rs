use serde::{Deserialize, Serialize};

use super::{Channel, BLOCK_AREA};
use crate::error::{Error, Result};

/// Annex K luminance table, row-major.
pub const STD_LUMA_QTABLE: [u16; BLOCK_AREA] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, row-major.
pub const STD_CHROMA_QTABLE: [u16; BLOCK_AREA] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scale factor for a quality percentage: `2 - q/50` at or above 50, `50/q` below.
pub fn quality_scale(quality: f64) -> Result<f64> {
    if !(quality > 0.0 && quality <= 100.0) {
        return Err(Error::InvalidArgument(format!("quality {quality} outside (0, 100]")));
    }
    Ok(if quality >= 50.0 { 2.0 - quality / 50.0 } else { 50.0 / quality })
}

/// Integer quantization table with entries in `[1, 255]`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u16>>", into = "Vec<Vec<u16>>")]
pub struct QTable(pub [u16; BLOCK_AREA]);

impl QTable {
    pub fn new(values: [u16; BLOCK_AREA]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(1..=255).contains(*v)) {
            return Err(Error::InvalidArgument(format!("Q-table entry {v} outside [1, 255]")));
        }
        Ok(Self(values))
    }

    /// A standard table scaled for `quality`, rounding half up and clamping to `[1, 255]`.
    pub fn scaled(base: &[u16; BLOCK_AREA], quality: f64) -> Result<Self> {
        let s = quality_scale(quality)?;
        Ok(Self(base.map(|b| (b as f64 * s + 0.5).floor().clamp(1.0, 255.0) as u16)))
    }

    pub fn rows(&self) -> Vec<Vec<u16>> {
        self.0.chunks(8).map(|r| r.to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<u16>>> for QTable {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u16>>) -> Result<Self> {
        if rows.len() != 8 || rows.iter().any(|r| r.len() != 8) {
            return Err(Error::InvalidArgument("Q-table must be 8x8".into()));
        }
        let mut v = [0u16; BLOCK_AREA];
        for (i, x) in rows.into_iter().flatten().enumerate() {
            v[i] = x;
        }
        QTable::new(v)
    }
}

impl From<QTable> for Vec<Vec<u16>> {
    fn from(q: QTable) -> Self {
        q.rows()
    }
}

/// The three trainable 8×8 reciprocal Q-tables for Y, Cb and Cr.
///
/// Entries live in `[0, 1]`; `0` discards the coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionKernels {
    pub q: [Vec<f64>; 3],
}

/// Upper bound for kernel entries (Q-table entries are at least 1).
pub const Q_MAX: f64 = 1.0;

impl CompressionKernels {
    pub fn filled(value: f64) -> Self {
        let v = vec![value; BLOCK_AREA];
        Self { q: [v.clone(), v.clone(), v] }
    }

    pub fn ones() -> Self {
        Self::filled(1.0)
    }

    pub fn zeros() -> Self {
        Self::filled(0.0)
    }

    pub fn from_arrays(q: [[f64; BLOCK_AREA]; 3]) -> Result<Self> {
        let k = Self { q: q.map(|a| a.to_vec()) };
        k.validate()?;
        Ok(k)
    }

    /// Element-wise reciprocal of integer tables.
    pub fn from_qtables(tables: &[QTable; 3]) -> Self {
        Self { q: tables.map(|t| t.0.iter().map(|&v| 1.0 / v as f64).collect()) }
    }

    /// Reciprocals of the Annex K tables scaled for `quality`.
    pub fn standard(quality: f64) -> Result<Self> {
        let luma = QTable::scaled(&STD_LUMA_QTABLE, quality)?;
        let chroma = QTable::scaled(&STD_CHROMA_QTABLE, quality)?;
        Ok(Self::from_qtables(&[luma, chroma, chroma]))
    }

    pub fn channel(&self, c: Channel) -> &[f64; BLOCK_AREA] {
        self.q[c.index()].as_slice().try_into().expect("kernel has 64 entries")
    }

    pub fn validate(&self) -> Result<()> {
        for (c, k) in self.q.iter().enumerate() {
            if k.len() != BLOCK_AREA {
                return Err(Error::InvalidArgument(format!("kernel {c} has {} entries", k.len())));
            }
            if let Some(v) = k.iter().find(|v| !(0.0..=Q_MAX).contains(*v)) {
                return Err(Error::InvalidArgument(format!("kernel {c} entry {v} outside [0, {Q_MAX}]")));
            }
        }
        Ok(())
    }

    /// Clamps every entry into `[0, 1]`.
    pub fn project(&mut self) {
        for k in &mut self.q {
            k.iter_mut().for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, Q_MAX) });
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { q: self.q.clone().map(|k| k.into_iter().map(|v| v * alpha).collect()) }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.q.iter().flat_map(|k| k.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_endpoints() {
        assert_eq!(QTable::scaled(&STD_LUMA_QTABLE, 50.0).unwrap().0, STD_LUMA_QTABLE);
        assert!(QTable::scaled(&STD_LUMA_QTABLE, 100.0).unwrap().0.iter().all(|&v| v == 1));
        let q12 = QTable::scaled(&STD_LUMA_QTABLE, 12.5).unwrap();
        assert_eq!(q12.0[0], 64);
        assert_eq!(q12.0[63], 255);
        assert!(quality_scale(0.0).is_err());
        assert!(quality_scale(101.0).is_err());
    }

    #[test]
    fn projection_and_validation() {
        let mut k = CompressionKernels::ones();
        k.q[0][3] = 1.7;
        k.q[2][5] = -0.2;
        assert!(k.validate().is_err());
        k.project();
        k.validate().unwrap();
        assert_eq!(k.q[0][3], 1.0);
        assert_eq!(k.q[2][5], 0.0);
    }

    #[test]
    fn qtable_json_shape() {
        let q = QTable::new(STD_CHROMA_QTABLE).unwrap();
        let s = serde_json::to_string(&q).unwrap();
        assert!(s.starts_with("[[17,18,24"));
        let back: QTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
        assert!(serde_json::from_str::<QTable>("[[0]]").is_err());
    }
}
