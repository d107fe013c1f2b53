use serde::{Deserialize, Serialize};

use super::{ImageRgb, Plane, YCbCrFull};

/// RGB → YCbCr affine map and its inverse.
///
/// The two halves are stored separately so that a trained transform keeps an
/// explicit decoder side; freshly constructed transforms are exact inverses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    pub forward: [[f64; 3]; 3],
    pub forward_offset: [f64; 3],
    pub inverse: [[f64; 3]; 3],
    pub inverse_offset: [f64; 3],
    pub trainable: bool,
}

/// JFIF / BT.601 full-range coefficients.
const JPEG_FORWARD: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_735_891_647_856, -0.331_264_108_352_144, 0.5],
    [0.5, -0.418_687_589_158_345, -0.081_312_410_841_655],
];
const JPEG_OFFSET: [f64; 3] = [0.0, 128.0, 128.0];

impl Default for ColorTransform {
    fn default() -> Self {
        Self::jpeg()
    }
}

impl ColorTransform {
    pub fn jpeg() -> Self {
        Self::from_forward(JPEG_FORWARD, JPEG_OFFSET)
    }

    /// Builds the transform from its forward half; the inverse is solved exactly.
    ///
    /// Panics if the matrix is singular.
    pub fn from_forward(forward: [[f64; 3]; 3], offset: [f64; 3]) -> Self {
        let inverse = invert3(&forward).expect("colour matrix must be invertible");
        let mut inverse_offset = [0.0; 3];
        for (r, o) in inverse_offset.iter_mut().enumerate() {
            *o = -(0..3).map(|c| inverse[r][c] * offset[c]).sum::<f64>();
        }
        Self {
            forward,
            forward_offset: offset,
            inverse,
            inverse_offset,
            trainable: false,
        }
    }

    pub fn apply_forward(&self, rgb: [f64; 3]) -> [f64; 3] {
        apply(&self.forward, &self.forward_offset, rgb)
    }

    pub fn apply_inverse(&self, ycc: [f64; 3]) -> [f64; 3] {
        apply(&self.inverse, &self.inverse_offset, ycc)
    }
}

fn apply(m: &[[f64; 3]; 3], off: &[f64; 3], v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for r in 0..3 {
        out[r] = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2] + off[r];
    }
    out
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            inv[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    Some(inv)
}

/// Converts to full-resolution YCbCr and applies the −128 level shift to all planes.
pub fn rgb_to_ycbcr(img: &ImageRgb, ct: &ColorTransform) -> YCbCrFull {
    let (w, h) = (img.width(), img.height());
    let mut planes = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    for i in 0..w * h {
        let ycc = ct.apply_forward([r[i], g[i], b[i]]);
        for c in 0..3 {
            planes[c][i] = ycc[c] - 128.0;
        }
    }
    let [y, cb, cr] = planes.map(|data| Plane::new(w, h, data));
    YCbCrFull {
        y,
        cb,
        cr,
        level_shifted: true,
    }
}

/// Undoes the level shift and colour transform; output clamped to `[0, 255]`.
pub fn ycbcr_to_rgb(full: &YCbCrFull, ct: &ColorTransform) -> ImageRgb {
    let (w, h) = (full.y.width, full.y.height);
    let shift = if full.level_shifted { 128.0 } else { 0.0 };
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        let rgb = ct.apply_inverse([
            full.y.data[i] + shift,
            full.cb.data[i] + shift,
            full.cr.data[i] + shift,
        ]);
        for c in 0..3 {
            data[c * w * h + i] = rgb[c].clamp(0.0, 255.0);
        }
    }
    ImageRgb::from_planar_unchecked(w, h, data)
}
