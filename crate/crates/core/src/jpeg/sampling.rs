use super::Plane;
use crate::engine::upsample2x_values;
use crate::error::{Error, Result};

/// Three full-resolution planes straight out of the colour transform.
#[derive(Clone, Debug, PartialEq)]
pub struct YCbCrFull {
    pub y: Plane,
    pub cb: Plane,
    pub cr: Plane,
    pub level_shifted: bool,
}

/// 4:2:0 image: chroma planes at half resolution in each direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageYCbCr {
    pub y: Plane,
    pub cb: Plane,
    pub cr: Plane,
    pub level_shifted: bool,
}

fn box_down(p: &Plane) -> Plane {
    let (w, h) = (p.width / 2, p.height / 2);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = 2 * y * p.width + 2 * x;
            data[y * w + x] =
                0.25 * (p.data[i] + p.data[i + 1] + p.data[i + p.width] + p.data[i + p.width + 1]);
        }
    }
    Plane::new(w, h, data)
}

/// Halves both chroma planes with a 2×2 box mean; luma is untouched.
pub fn subsample_420(full: &YCbCrFull) -> Result<ImageYCbCr> {
    let (w, h) = (full.y.width, full.y.height);
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "4:2:0 subsampling needs even dimensions, got {w}x{h}"
        )));
    }
    Ok(ImageYCbCr {
        y: full.y.clone(),
        cb: box_down(&full.cb),
        cr: box_down(&full.cr),
        level_shifted: full.level_shifted,
    })
}

fn bilinear_up(p: &Plane) -> Plane {
    Plane::new(2 * p.width, 2 * p.height, upsample2x_values(&p.data, 1, p.height, p.width))
}

/// Bilinear 2× chroma upsampling (sample-center aligned, edges replicated).
pub fn upsample_420(img: &ImageYCbCr) -> YCbCrFull {
    YCbCrFull {
        y: img.y.clone(),
        cb: bilinear_up(&img.cb),
        cr: bilinear_up(&img.cr),
        level_shifted: img.level_shifted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(chroma: Plane) -> YCbCrFull {
        YCbCrFull {
            y: Plane::filled(chroma.width, chroma.height, 0.0),
            cb: chroma.clone(),
            cr: chroma,
            level_shifted: true,
        }
    }

    #[test]
    fn box_mean_of_tile() {
        let f = full(Plane::new(2, 2, vec![0.0, 0.0, 0.0, 4.0]));
        let s = subsample_420(&f).unwrap();
        assert_eq!(s.cb.data, vec![1.0]);
    }

    #[test]
    fn constant_planes_survive_both_directions() {
        let f = full(Plane::filled(8, 6, 7.5));
        let s = subsample_420(&f).unwrap();
        assert!(s.cb.data.iter().all(|&v| v == 7.5));
        assert_eq!((s.cb.width, s.cb.height), (4, 3));
        let up = upsample_420(&s);
        assert!(up.cr.data.iter().all(|&v| (v - 7.5).abs() < 1e-12));
        let again = subsample_420(&up).unwrap();
        assert!(again.cb.data.iter().all(|&v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn odd_dimensions_rejected() {
        let f = full(Plane::filled(3, 4, 0.0));
        assert!(subsample_420(&f).is_err());
    }
}
