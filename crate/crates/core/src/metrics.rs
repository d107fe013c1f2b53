//! Reconstruction quality and classification accuracy.

use crate::error::{Error, Result};
use crate::jpeg::ImageRgb;

const PEAK: f64 = 255.0;

fn check_dims(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::InvalidArgument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.planar().len() as f64;
    Ok(a.planar().iter().zip(b.planar()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR in dB over all RGB samples; `f64::INFINITY` for identical images.
pub fn psnr(reference: &ImageRgb, test: &ImageRgb) -> Result<f64> {
    let m = mse(reference, test)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (PEAK * PEAK / m).log10() })
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w × h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of the BT.601 luma planes with an 11×11 Gaussian window (σ = 1.5).
///
/// Windows lying fully inside the image are averaged; images narrower than the
/// window use a window shrunk to the smaller side.
pub fn ssim(reference: &ImageRgb, test: &ImageRgb) -> Result<f64> {
    check_dims(reference, test)?;
    let (w, h) = (reference.width(), reference.height());
    let (a, b) = (reference.luma(), test.luma());
    let full = gaussian_window();
    let n = SSIM_WIN.min(w).min(h);
    let lo = (SSIM_WIN - n) / 2;
    let s: f64 = full[lo..lo + n].iter().sum();
    let k: Vec<f64> = full[lo..lo + n].iter().map(|v| v / s).collect();

    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(&a, w, h, &k);
    let (mu_b, _, _) = filter_valid(&b, w, h, &k);
    let (aa, _, _) = filter_valid(&prod(&a, &a), w, h, &k);
    let (bb, _, _) = filter_valid(&prod(&b, &b), w, h, &k);
    let (ab, _, _) = filter_valid(&prod(&a, &b), w, h, &k);

    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Fraction of rows whose label is among the `k` largest logits; ties favour the lower class index.
pub fn topk_accuracy(logits: &[f64], num_classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes {
        return Err(Error::InvalidArgument(format!(
            "{} logits for {} labels and {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if k == 0 || k > num_classes {
        return Err(Error::InvalidArgument(format!("k = {k} outside [1, {num_classes}]")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (row, &label) in logits.chunks(num_classes).zip(labels) {
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {num_classes} classes")));
        }
        let target = row[label];
        // classes ranked ahead of the label: larger logit, or equal logit with lower index
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psnr_examples() {
        let a = ImageRgb::filled(16, 16, [100.0, 50.0, 3.0]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = ImageRgb::filled(16, 16, [101.0, 51.0, 4.0]);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 48.130_803_608_679_1, epsilon = 1e-9);
        assert!(psnr(&a, &ImageRgb::filled(17, 16, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_of_constants() {
        let black = ImageRgb::filled(16, 16, [0.0; 3]);
        let white = ImageRgb::filled(16, 16, [255.0; 3]);
        let c1 = (0.01f64 * 255.0).powi(2);
        let v = ssim(&black, &white).unwrap();
        assert_relative_eq!(v, c1 / (255.0f64.powi(2) + c1), epsilon = 1e-9);
        assert!(v <= 0.01);
        assert_relative_eq!(ssim(&white, &white).unwrap(), 1.0);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_accuracy(&[2.0, 1.0, 0.0], 3, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&[2.0, 1.0, 0.0], 3, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&[0.0, 0.0, 0.0], 3, &[2], 3).unwrap(), 1.0);
        // ties go to the lower index
        assert_eq!(topk_accuracy(&[1.0, 1.0], 2, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&[1.0, 1.0], 2, &[1], 1).unwrap(), 0.0);
        assert!(topk_accuracy(&[1.0, 1.0], 2, &[2], 1).is_err());
        assert!(topk_accuracy(&[1.0, 1.0], 2, &[0], 3).is_err());
    }
}
