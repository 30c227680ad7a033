//! Full-reference image quality metrics.

use crate::error::{shape_err, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    if !x.same_size(y) {
        return Err(shape_err!(
            "metric inputs differ: {}x{} vs {}x{}",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        ));
    }
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)`, capped for identical images.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

pub fn mean_abs_error(x: &Image, y: &Image) -> Result<f64> {
    if !x.same_size(y) {
        return Err(shape_err!("metric inputs differ in size"));
    }
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn gray(img: &Image) -> Vec<f64> {
    let n = img.width() * img.height();
    (0..n)
        .map(|i| (0..3).map(|c| img.plane(c)[i] as f64).sum::<f64>() / 3.0)
        .collect()
}

/// Separable "valid" Gaussian filtering.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of the channel-mean grayscale images, 11x11 Gaussian window
/// with sigma 1.5, dynamic range 1.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    if !x.same_size(y) {
        return Err(shape_err!("ssim inputs differ in size"));
    }
    let (w, h) = (x.width(), x.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(shape_err!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        ));
    }
    let k = gaussian_window();
    let (a, b) = (gray(x), gray(y));
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let (mu_a, ow, oh) = filter(&a, w, h, &k);
    let (mu_b, ..) = filter(&b, w, h, &k);
    let (aa, ..) = filter(&prod(&a, &a), w, h, &k);
    let (bb, ..) = filter(&prod(&b, &b), w, h, &k);
    let (ab, ..) = filter(&prod(&a, &b), w, h, &k);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ow * oh) as f64)
}
