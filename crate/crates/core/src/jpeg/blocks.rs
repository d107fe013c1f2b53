use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{Plane, BLOCK, BLOCK_AREA};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Y,
    Cb,
    Cr,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Y, Channel::Cb, Channel::Cr];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_luma(self) -> bool {
        self == Channel::Y
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Y => "y",
            Channel::Cb => "cb",
            Channel::Cr => "cr",
        }
    }
}

/// The orthonormal 8×8 type-II DCT matrix `D`, so that a block transforms as `D·I·Dᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    pub d: [[f64; BLOCK]; BLOCK],
}

impl DctBasis {
    pub fn orthonormal() -> &'static DctBasis {
        static BASIS: OnceLock<DctBasis> = OnceLock::new();
        BASIS.get_or_init(|| {
            let mut d = [[0.0; BLOCK]; BLOCK];
            for (u, row) in d.iter_mut().enumerate() {
                let c = if u == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
                for (x, v) in row.iter_mut().enumerate() {
                    *v = c * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / (2 * BLOCK) as f64).cos();
                }
            }
            DctBasis { d }
        })
    }

    /// `D·I·Dᵀ` on a row-major block.
    pub fn forward(&self, block: &[f64; BLOCK_AREA]) -> [f64; BLOCK_AREA] {
        let mut tmp = [0.0; BLOCK_AREA];
        // tmp = D·I
        for u in 0..BLOCK {
            for y in 0..BLOCK {
                tmp[u * BLOCK + y] = (0..BLOCK).map(|x| self.d[u][x] * block[x * BLOCK + y]).sum();
            }
        }
        let mut out = [0.0; BLOCK_AREA];
        for u in 0..BLOCK {
            for v in 0..BLOCK {
                out[u * BLOCK + v] = (0..BLOCK).map(|y| tmp[u * BLOCK + y] * self.d[v][y]).sum();
            }
        }
        out
    }

    /// `Dᵀ·F·D` on a row-major block.
    pub fn inverse(&self, coef: &[f64; BLOCK_AREA]) -> [f64; BLOCK_AREA] {
        let mut tmp = [0.0; BLOCK_AREA];
        for x in 0..BLOCK {
            for v in 0..BLOCK {
                tmp[x * BLOCK + v] = (0..BLOCK).map(|u| self.d[u][x] * coef[u * BLOCK + v]).sum();
            }
        }
        let mut out = [0.0; BLOCK_AREA];
        for x in 0..BLOCK {
            for y in 0..BLOCK {
                out[x * BLOCK + y] = (0..BLOCK).map(|v| tmp[x * BLOCK + v] * self.d[v][y]).sum();
            }
        }
        out
    }

    /// The 64×64 matrix `M` with `vec(D·I·Dᵀ) = M·vec(I)` (row-major vec).
    pub fn kron(&self) -> Vec<f64> {
        let mut m = vec![0.0; BLOCK_AREA * BLOCK_AREA];
        for u in 0..BLOCK {
            for v in 0..BLOCK {
                for x in 0..BLOCK {
                    for y in 0..BLOCK {
                        m[(u * BLOCK + v) * BLOCK_AREA + x * BLOCK + y] = self.d[u][x] * self.d[v][y];
                    }
                }
            }
        }
        m
    }
}

/// One channel's 8×8 blocks in raster order.
///
/// `width` and `height` are the source plane size before edge padding, so
/// [`deblockify`] can crop back.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid {
    pub channel: Channel,
    pub blocks: Vec<[f64; BLOCK_AREA]>,
    pub blocks_per_row: usize,
    pub blocks_per_col: usize,
    pub width: usize,
    pub height: usize,
}

impl BlockGrid {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn map_blocks(&self, f: impl Fn(&[f64; BLOCK_AREA]) -> [f64; BLOCK_AREA]) -> BlockGrid {
        BlockGrid {
            blocks: self.blocks.iter().map(f).collect(),
            ..self.clone()
        }
    }

    /// Coefficients as integers; values are expected to be integral already.
    pub fn to_ints(&self) -> Vec<[i32; BLOCK_AREA]> {
        self.blocks.iter().map(|b| b.map(|v| v.round() as i32)).collect()
    }
}

/// Splits a plane into 8×8 blocks, padding right/bottom by edge replication.
pub fn blockify(plane: &Plane, channel: Channel) -> BlockGrid {
    let bpr = plane.width.div_ceil(BLOCK);
    let bpc = plane.height.div_ceil(BLOCK);
    let mut blocks = Vec::with_capacity(bpr * bpc);
    for by in 0..bpc {
        for bx in 0..bpr {
            let mut b = [0.0; BLOCK_AREA];
            for r in 0..BLOCK {
                let y = (by * BLOCK + r).min(plane.height - 1);
                for c in 0..BLOCK {
                    let x = (bx * BLOCK + c).min(plane.width - 1);
                    b[r * BLOCK + c] = plane.data[y * plane.width + x];
                }
            }
            blocks.push(b);
        }
    }
    BlockGrid {
        channel,
        blocks,
        blocks_per_row: bpr,
        blocks_per_col: bpc,
        width: plane.width,
        height: plane.height,
    }
}

/// Reassembles blocks and crops to the original plane size.
pub fn deblockify(grid: &BlockGrid) -> Plane {
    let mut data = vec![0.0; grid.width * grid.height];
    for y in 0..grid.height {
        for x in 0..grid.width {
            let b = &grid.blocks[(y / BLOCK) * grid.blocks_per_row + x / BLOCK];
            data[y * grid.width + x] = b[(y % BLOCK) * BLOCK + x % BLOCK];
        }
    }
    Plane::new(grid.width, grid.height, data)
}

pub fn dct_forward(grid: &BlockGrid) -> BlockGrid {
    let basis = DctBasis::orthonormal();
    grid.map_blocks(|b| basis.forward(b))
}

pub fn idct(grid: &BlockGrid) -> BlockGrid {
    let basis = DctBasis::orthonormal();
    grid.map_blocks(|b| basis.inverse(b))
}

fn check_kernel(q: &[f64; BLOCK_AREA]) -> Result<()> {
    if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "compression kernel entry ({}, {}) = {v} must be a finite non-negative number",
            i / BLOCK,
            i % BLOCK
        )));
    }
    Ok(())
}

/// `round(F(j,k) · q(j,k))`, half away from zero; entries with `q == 0` are discarded.
pub fn quantize(grid: &BlockGrid, q: &[f64; BLOCK_AREA]) -> Result<BlockGrid> {
    check_kernel(q)?;
    Ok(grid.map_blocks(|b| {
        let mut out = [0.0; BLOCK_AREA];
        for i in 0..BLOCK_AREA {
            out[i] = if q[i] == 0.0 { 0.0 } else { (b[i] * q[i]).round() };
        }
        out
    }))
}

/// `Fq(j,k) / q(j,k)`, or 0 where the entry was discarded.
pub fn dequantize(grid: &BlockGrid, q: &[f64; BLOCK_AREA]) -> BlockGrid {
    grid.map_blocks(|b| {
        let mut out = [0.0; BLOCK_AREA];
        for i in 0..BLOCK_AREA {
            out[i] = if q[i] > 0.0 { b[i] / q[i] } else { 0.0 };
        }
        out
    })
}
