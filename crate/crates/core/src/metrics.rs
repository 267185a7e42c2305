//! Image quality metrics on [0, 1] images. Inputs are clamped first.

use crate::error::{Error, Result};
use crate::tasks::{gaussian_kernel_2d, Image, CHANNELS};

/// Reported value when prediction and target are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all pixels and channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(prediction: &Image, target: &Image) -> Result<f64> {
    check_pair(prediction, target)?;
    let mut sum = 0.0f64;
    for (&p, &t) in prediction.data.iter().zip(&target.data) {
        let d = p.clamp(0.0, 1.0) as f64 - t.clamp(0.0, 1.0) as f64;
        sum += d * d;
    }
    let mse = sum / prediction.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1. Only windows lying fully inside the image are scored;
/// images smaller than the window use a window shrunk to the image size.
/// Channels are scored separately and averaged.
pub fn ssim(prediction: &Image, target: &Image) -> Result<f64> {
    check_pair(prediction, target)?;
    let (h, w) = (prediction.height, prediction.width);
    let size = SSIM_WINDOW.min(h).min(w);
    if size == 0 {
        return Err(Error::Shape("ssim of an empty image".into()));
    }
    let size = if size % 2 == 0 { size - 1 } else { size };
    let window = gaussian_kernel_2d(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..CHANNELS {
        let x: Vec<f64> = prediction.plane(c).iter().map(|&v| v.clamp(0.0, 1.0) as f64).collect();
        let y: Vec<f64> = target.plane(c).iter().map(|&v| v.clamp(0.0, 1.0) as f64).collect();
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..size {
                    for dx in 0..size {
                        let wgt = window[dy * size + dx];
                        let i = (y0 + dy) * w + x0 + dx;
                        mx += wgt * x[i];
                        my += wgt * y[i];
                        sxx += wgt * x[i] * x[i];
                        syy += wgt * y[i] * y[i];
                        sxy += wgt * x[i] * y[i];
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
