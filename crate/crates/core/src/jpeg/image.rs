use crate::error::{Error, Result};

/// Single-channel plane of samples, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(width * height, data.len(), "plane data length");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// RGB image with planar `f64` samples in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Smallest accepted edge length.
pub const MIN_DIM: usize = 16;

impl ImageRgb {
    /// Planar data `R..., G..., B...`; samples must lie in `[0, 255]`.
    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < MIN_DIM || height < MIN_DIM {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} smaller than {MIN_DIM}x{MIN_DIM}"
            )));
        }
        if data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image needs {} samples, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("sample {bad} outside [0, 255]")));
        }
        Ok(Self { width, height, data })
    }

    pub(crate) fn from_planar_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * width * height);
        Self { width, height, data }
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                rgb.len()
            )));
        }
        let n = width * height;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f64;
            }
        }
        Self::from_planar(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let n = width * height;
        let mut data = Vec::with_capacity(3 * n);
        for v in rgb {
            data.extend(std::iter::repeat(v.clamp(0.0, 255.0)).take(n));
        }
        Self::from_planar_unchecked(width, height, data)
    }

    /// Interleaved 8-bit RGB, rounding half away from zero.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(self.data[c * n + i].round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn planar(&self) -> &[f64] {
        &self.data
    }

    /// BT.601 luma plane used by SSIM.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..self.width * self.height)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    }

    /// Top-left `width × height` window.
    pub fn crop(&self, width: usize, height: usize) -> Self {
        assert!(width <= self.width && height <= self.height);
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            let p = self.plane(c);
            for y in 0..height {
                data.extend_from_slice(&p[y * self.width..y * self.width + width]);
            }
        }
        Self::from_planar_unchecked(width, height, data)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }

    /// Writes PNG or PPM depending on the extension.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
