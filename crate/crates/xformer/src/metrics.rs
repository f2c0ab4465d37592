//! Image quality metrics: PSNR and the windowed SSIM index.

use crate::error::{Result, XError};
use crate::image_io::Image;

pub const PSNR_CAP_DB: f64 = 100.0;

fn check_shapes(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(XError::Dim(format!(
            "{what}: image shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at 100 for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_shapes(a, b, "psnr")?;
    let mut mse = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = (*x - *y) as f64;
        mse += d * d;
    }
    mse /= a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let mut k = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as isize - c;
            let dx = x as isize - c;
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), evaluated on
/// the valid region, computed per channel and averaged. Peak is 1.0.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b, "ssim")?;
    let (h, w, channels) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(XError::Dim(format!(
            "ssim requires at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..channels {
        for wy in 0..=h - SSIM_WINDOW {
            for wx in 0..=w - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wgt = kernel[ky * SSIM_WINDOW + kx];
                        let idx = ((wy + ky) * w + wx + kx) * channels + ch;
                        let va = a.data[idx] as f64;
                        let vb = b.data[idx] as f64;
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * (va * va);
                        bb += wgt * (vb * vb);
                        // grouped so the accumulation is exactly symmetric
                        ab += wgt * (va * vb);
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
