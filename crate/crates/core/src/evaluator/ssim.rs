//! Structural similarity on luma with an 11x11 Gaussian window.

use ndarray::Array2;

use crate::error::{MiveError, Result};
use crate::tensor::Video;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 1.0;

/// Normalized `WINDOW x WINDOW` Gaussian weights.
pub fn gaussian_window() -> Array2<f64> {
    let half = (WINDOW / 2) as f64;
    let g = Array2::from_shape_fn((WINDOW, WINDOW), |(y, x)| {
        let (dy, dx) = (y as f64 - half, x as f64 - half);
        (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp()
    });
    let s = g.sum();
    g / s
}

/// Mean SSIM over every fully contained window position.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MiveError::shape(format!("images {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(MiveError::shape(format!("images must be at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - WINDOW {
        for x0 in 0..=w - WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((dy, dx), &k) in win.indexed_iter() {
                let (p, q) = (a[[y0 + dy, x0 + dx]], b[[y0 + dy, x0 + dx]]);
                ma += k * p;
                mb += k * q;
                saa += k * p * p;
                sbb += k * q * q;
                sab += k * p * q;
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Frame-averaged SSIM of the luma planes.
pub fn ssim_video(a: &Video, b: &Video) -> Result<f64> {
    a.check_same_shape(b)?;
    let t = a.frames();
    let mut sum = 0.0;
    for f in 0..t {
        sum += ssim(&a.luma(f), &b.luma(f))?;
    }
    Ok(sum / t as f64)
}
