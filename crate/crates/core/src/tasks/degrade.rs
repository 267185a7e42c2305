//! Synthetic degradations: additive Gaussian noise, Gaussian blur, DCT block
//! quantization (a JPEG-like surrogate, not a bitstream codec) and additive
//! rain streaks. Each is a pure function of the clean image, its parameters
//! and a per-sample seed, and clamps to [0, 1] as its last step.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Degradation {
    /// Additive N(0, (sigma/255)²) per pixel and channel.
    GaussianNoise { sigma: f64 },
    /// Normalized Gaussian kernel of odd size, sigma drawn uniformly per sample.
    GaussianBlur {
        kernel_size: usize,
        sigma_min: f64,
        sigma_max: f64,
    },
    /// 8×8 DCT quantization with the luminance table scaled by a quality
    /// factor drawn uniformly per sample.
    BlockArtifact { quality_min: u32, quality_max: u32 },
    /// Bright line segments; angles are degrees from the horizontal axis.
    RainStreaks {
        density: f64,
        length_min: f64,
        length_max: f64,
        angle_min: f64,
        angle_max: f64,
        intensity_min: f64,
        intensity_max: f64,
    },
}

impl Degradation {
    pub fn noise(sigma: f64) -> Self {
        Degradation::GaussianNoise { sigma }
    }

    /// Training blur: 15×15 with sigma in [0.2, 3].
    pub fn blur_train() -> Self {
        Degradation::GaussianBlur {
            kernel_size: 15,
            sigma_min: 0.2,
            sigma_max: 3.0,
        }
    }

    /// Test blur: sigma fixed at 2.5.
    pub fn blur_test() -> Self {
        Degradation::GaussianBlur {
            kernel_size: 15,
            sigma_min: 2.5,
            sigma_max: 2.5,
        }
    }

    /// Training blocking: quality in [10, 70].
    pub fn block_train() -> Self {
        Degradation::BlockArtifact {
            quality_min: 10,
            quality_max: 70,
        }
    }

    /// Test blocking: quality fixed at 20.
    pub fn block_test() -> Self {
        Degradation::BlockArtifact {
            quality_min: 20,
            quality_max: 20,
        }
    }

    pub fn rain_default() -> Self {
        Degradation::RainStreaks {
            density: 0.002,
            length_min: 8.0,
            length_max: 20.0,
            angle_min: 70.0,
            angle_max: 110.0,
            intensity_min: 0.15,
            intensity_max: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match *self {
            Degradation::GaussianNoise { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return bad(format!("noise sigma must be >= 0, got {sigma}"));
                }
            }
            Degradation::GaussianBlur {
                kernel_size,
                sigma_min,
                sigma_max,
            } => {
                if kernel_size % 2 == 0 {
                    return bad(format!("blur kernel size must be odd, got {kernel_size}"));
                }
                if !(sigma_min >= 0.0 && sigma_min <= sigma_max && sigma_max.is_finite()) {
                    return bad(format!("blur sigma range [{sigma_min}, {sigma_max}] is invalid"));
                }
            }
            Degradation::BlockArtifact {
                quality_min,
                quality_max,
            } => {
                if !(1..=100).contains(&quality_min) || !(1..=100).contains(&quality_max) || quality_min > quality_max {
                    return bad(format!(
                        "quality range [{quality_min}, {quality_max}] must lie in [1, 100]"
                    ));
                }
            }
            Degradation::RainStreaks {
                density,
                length_min,
                length_max,
                angle_min,
                angle_max,
                intensity_min,
                intensity_max,
            } => {
                let ok = density >= 0.0
                    && density.is_finite()
                    && length_min > 0.0
                    && length_min <= length_max
                    && length_max.is_finite()
                    && angle_min <= angle_max
                    && angle_max.is_finite()
                    && angle_min.is_finite()
                    && intensity_min >= 0.0
                    && intensity_min <= intensity_max
                    && intensity_max <= 1.0;
                if !ok {
                    return bad(format!("invalid rain streak parameters {self:?}"));
                }
            }
        }
        Ok(())
    }
}

/// Applies `d` to `clean` using randomness derived only from `sample_seed`.
pub fn degrade(clean: &Image, d: &Degradation, sample_seed: u64) -> Result<Image> {
    d.validate()?;
    let mut rng = rng_for(sample_seed, &[]);
    let mut out = match *d {
        Degradation::GaussianNoise { sigma } => add_noise(clean, sigma / 255.0, &mut rng),
        Degradation::GaussianBlur {
            kernel_size,
            sigma_min,
            sigma_max,
        } => {
            let sigma = if sigma_max > sigma_min {
                rng.random_range(sigma_min..=sigma_max)
            } else {
                sigma_min
            };
            gaussian_blur(clean, kernel_size, sigma)
        }
        Degradation::BlockArtifact {
            quality_min,
            quality_max,
        } => {
            let q = rng.random_range(quality_min..=quality_max);
            block_quantize(clean, &quant_table(q))
        }
        Degradation::RainStreaks { .. } => add_rain(clean, d, &mut rng),
    };
    out.clamp01();
    Ok(out)
}

/// Additive Gaussian noise without the final clamp.
pub fn add_noise<R: Rng>(clean: &Image, std: f64, rng: &mut R) -> Image {
    let mut out = clean.clone();
    if std == 0.0 {
        return out;
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in &mut out.data {
        *v = (*v as f64 + dist.sample(rng)) as f32;
    }
    out
}

/// Normalized 1-D Gaussian taps. Non-positive sigma degenerates to a delta.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut taps = vec![0.0; size];
    if sigma <= 0.0 {
        taps[size / 2] = 1.0;
        return taps;
    }
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Normalized 2-D Gaussian kernel, row-major `size × size`.
pub fn gaussian_kernel_2d(size: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(size, sigma);
    let mut k: Vec<f64> = taps.iter().flat_map(|&a| taps.iter().map(move |&b| a * b)).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(clean: &Image, size: usize, sigma: f64) -> Image {
    let taps = gaussian_taps(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (clean.height, clean.width);
    let mut out = Image::new(h, w);
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..CHANNELS {
        let src = clean.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, w);
                    acc += t * src[y * w + xx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - r, h);
                    acc += t * tmp[yy * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    out
}

const LUMINANCE_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance quantization table scaled by the IJG quality convention.
/// Quality 100 yields the all-ones table.
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [1.0; 64];
    for (o, &b) in out.iter_mut().zip(LUMINANCE_TABLE.iter()) {
        *o = ((b * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut basis = [[0.0; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, b) in row.iter_mut().enumerate() {
            *b = alpha * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    basis
}

/// Orthonormal 8×8 block DCT, coefficient rounding to multiples of the table,
/// inverse DCT. Values are processed on the 0..255 scale shifted by 128 and
/// partial edge blocks replicate the border.
pub fn block_quantize(clean: &Image, table: &[f64; 64]) -> Image {
    let basis = dct_basis();
    let (h, w) = (clean.height, clean.width);
    let mut out = clean.clone();
    let mut block = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    for c in 0..CHANNELS {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        let v = clean.get(c, (by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = v as f64 * 255.0 - 128.0;
                    }
                }
                // rows then columns
                for y in 0..8 {
                    for u in 0..8 {
                        tmp[y * 8 + u] = (0..8).map(|x| basis[u][x] * block[y * 8 + x]).sum();
                    }
                }
                for v in 0..8 {
                    for u in 0..8 {
                        let f: f64 = (0..8).map(|y| basis[v][y] * tmp[y * 8 + u]).sum();
                        let q = table[v * 8 + u];
                        coef[v * 8 + u] = (f / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for u in 0..8 {
                        tmp[y * 8 + u] = (0..8).map(|v| basis[v][y] * coef[v * 8 + u]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let (yy, xx) = (by + y, bx + x);
                        if yy < h && xx < w {
                            let p: f64 = (0..8).map(|u| basis[u][x] * tmp[y * 8 + u]).sum();
                            out.set(c, yy, xx, ((p + 128.0) / 255.0) as f32);
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_rain<R: Rng>(clean: &Image, d: &Degradation, rng: &mut R) -> Image {
    let Degradation::RainStreaks {
        density,
        length_min,
        length_max,
        angle_min,
        angle_max,
        intensity_min,
        intensity_max,
    } = *d
    else {
        unreachable!("add_rain called with {d:?}");
    };
    let (h, w) = (clean.height, clean.width);
    let expected = density * (h * w) as f64;
    let mut count = expected.floor() as usize;
    if rng.random::<f64>() < expected - expected.floor() {
        count += 1;
    }
    let uniform = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut layer = vec![0.0f64; h * w];
    for _ in 0..count {
        let y0 = rng.random_range(0.0..h as f64);
        let x0 = rng.random_range(0.0..w as f64);
        let angle = uniform(rng, angle_min, angle_max).to_radians();
        let length = uniform(rng, length_min, length_max);
        let intensity = uniform(rng, intensity_min, intensity_max);
        let (dx, dy) = (angle.cos(), angle.sin());
        let steps = (length * 2.0).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let (x, y) = (x0 + t * dx, y0 + t * dy);
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                continue;
            }
            let idx = y as usize * w + x as usize;
            layer[idx] = layer[idx].max(intensity);
        }
    }
    let mut out = clean.clone();
    for c in 0..CHANNELS {
        for (v, &l) in out.plane_mut(c).iter_mut().zip(&layer) {
            *v = (*v as f64 + l) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::source::CleanImageSource;

    fn sample_image() -> Image {
        CleanImageSource::procedural(4, 32).load_pool(3).unwrap().remove(1)
    }

    #[test]
    fn zero_noise_is_identity() {
        let im = sample_image();
        assert_eq!(degrade(&im, &Degradation::noise(0.0), 1).unwrap(), im);
    }

    #[test]
    fn zero_sigma_blur_is_identity() {
        let im = sample_image();
        let d = Degradation::GaussianBlur {
            kernel_size: 15,
            sigma_min: 0.0,
            sigma_max: 0.0,
        };
        assert_eq!(degrade(&im, &d, 1).unwrap(), im);
        assert_eq!(gaussian_taps(15, 1e-6)[7], 1.0);
    }

    fn std_of(data: &[f32]) -> f64 {
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Std of clamp(0.5 + Z·s, 0, 1) by midpoint quadrature over the normal density.
    fn clamped_std_oracle(s: f64) -> f64 {
        let steps = 200_000;
        let (lo, hi) = (-10.0, 10.0);
        let dz = (hi - lo) / steps as f64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..steps {
            let z = lo + (i as f64 + 0.5) * dz;
            let w = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * dz;
            let v = (0.5 + z * s).clamp(0.0, 1.0);
            m1 += w * v;
            m2 += w * v * v;
        }
        (m2 - m1 * m1).sqrt()
    }

    #[test]
    fn noise_std_matches_sigma() {
        // 10^6 samples: 3 channels x 577 x 578 ≈ 1.0005e6
        let gray = Image::filled(577, 578, 0.5);
        let target = 50.0 / 255.0;
        let raw = add_noise(&gray, target, &mut rng_for(42, &[]));
        assert!((std_of(&raw.data) - target).abs() / target < 0.01);

        // clamping trims the tails beyond 2.55 sigma
        let clamped = degrade(&gray, &Degradation::noise(50.0), 42).unwrap();
        let expected = clamped_std_oracle(target);
        assert!(expected < target);
        assert!((std_of(&clamped.data) - expected).abs() / expected < 0.01);
    }

    #[test]
    fn blur_kernels_are_normalized() {
        for sigma in [0.2, 0.7, 1.5, 2.5, 3.0] {
            let k = gaussian_kernel_2d(15, sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let t = gaussian_taps(15, sigma);
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let im = Image::filled(20, 9, 0.25);
        let out = gaussian_blur(&im, 15, 2.5);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-20, 1), 0);
    }

    /// Largest pixel error an orthonormal 8x8 IDCT can produce from coefficient
    /// errors of at most 1/2: `0.5 · max_x (Σ_u |basis[u][x]|)²`.
    fn rounding_worst_case() -> f64 {
        let basis = dct_basis();
        let max_row = (0..8)
            .map(|x| (0..8).map(|u| basis[u][x].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        0.5 * max_row * max_row
    }

    #[test]
    fn quality_hundred_is_near_identity() {
        let table = quant_table(100);
        assert!(table.iter().all(|&q| q == 1.0));
        let bound = rounding_worst_case() / 255.0;
        let (mut sq, mut count) = (0.0f64, 0usize);
        for seed in 0..4 {
            let pool = CleanImageSource::procedural(6, 32).load_pool(seed).unwrap();
            for im in &pool {
                let out = block_quantize(im, &table);
                for (a, b) in im.data.iter().zip(&out.data) {
                    let d = (a - b).abs() as f64;
                    assert!(d <= bound + 1e-7, "deviation {}", d * 255.0);
                    sq += d * d;
                    count += 1;
                }
            }
        }
        // unit-step rounding of orthonormal coefficients: error variance 1/12 per pixel,
        // lowered slightly where clamping to [0, 1] trims saturated pixels
        let rms = (sq / count as f64).sqrt() * 255.0;
        assert!(rms <= (1.0f64 / 12.0).sqrt() * 1.05, "rms {rms}");
    }

    #[test]
    fn low_quality_produces_blocking() {
        let im = sample_image();
        let out = degrade(&im, &Degradation::block_test(), 9).unwrap();
        assert_ne!(out, im);
        assert_eq!(quant_table(50)[0], 16.0);
        assert_eq!(quant_table(20)[0], 40.0);
    }

    #[test]
    fn rain_only_brightens() {
        let im = Image::filled(64, 64, 0.3);
        let d = Degradation::rain_default();
        let out = degrade(&im, &d, 5).unwrap();
        assert!(out.data.iter().zip(&im.data).all(|(o, c)| o >= c));
        assert!(out.data.iter().any(|&v| v > 0.3));
    }

    #[test]
    fn outputs_clamped_and_deterministic() {
        let im = sample_image();
        for d in [
            Degradation::noise(80.0),
            Degradation::blur_train(),
            Degradation::block_train(),
            Degradation::rain_default(),
        ] {
            let a = degrade(&im, &d, 17).unwrap();
            assert_eq!(a, degrade(&im, &d, 17).unwrap());
            assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let im = sample_image();
        assert!(degrade(&im, &Degradation::noise(-1.0), 0).is_err());
        let even = Degradation::GaussianBlur {
            kernel_size: 4,
            sigma_min: 1.0,
            sigma_max: 2.0,
        };
        assert!(degrade(&im, &even, 0).is_err());
        let q = Degradation::BlockArtifact {
            quality_min: 0,
            quality_max: 50,
        };
        assert!(degrade(&im, &q, 0).is_err());
    }
}
