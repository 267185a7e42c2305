use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::degrade::gaussian_blur;
use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Where clean images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CleanImageSource {
    /// Seeded textures: gradients, checkerboards, filtered noise and shapes.
    Procedural { pool_size: usize, image_size: usize },
    /// Every `.png` in a directory, sorted by file name.
    Directory { path: PathBuf },
}

impl CleanImageSource {
    pub fn procedural(pool_size: usize, image_size: usize) -> Self {
        CleanImageSource::Procedural { pool_size, image_size }
    }

    pub fn load_pool(&self, seed: u64) -> Result<Vec<Image>> {
        match self {
            CleanImageSource::Procedural { pool_size, image_size } => {
                if *pool_size == 0 || *image_size == 0 {
                    return Err(Error::InvalidParameter(
                        "procedural source needs pool_size and image_size >= 1".into(),
                    ));
                }
                Ok((0..*pool_size)
                    .map(|i| procedural_image(*image_size, seed, i as u64))
                    .collect())
            }
            CleanImageSource::Directory { path } => {
                let rd = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
                let mut files: Vec<PathBuf> = rd
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
                    })
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::InvalidParameter(format!("no PNG images in {}", path.display())));
                }
                files.iter().map(|p| Image::load_png(p)).collect()
            }
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn linear_gradient<R: Rng>(size: usize, rng: &mut R) -> Image {
    let (a, b) = (random_color(rng), random_color(rng));
    let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut im = Image::new(size, size);
    let s = size.max(2) as f32 - 1.0;
    for y in 0..size {
        for x in 0..size {
            let proj = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy) / std::f32::consts::SQRT_2 + 0.5;
            for c in 0..CHANNELS {
                im.set(c, y, x, a[c] + (b[c] - a[c]) * proj.clamp(0.0, 1.0));
            }
        }
    }
    im
}

fn checkerboard<R: Rng>(base: &mut Image, rng: &mut R) {
    let period = rng.random_range(3..=12) as f32;
    let color = random_color(rng);
    let alpha = rng.random_range(0.3..0.9f32);
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    for y in 0..base.height {
        for x in 0..base.width {
            let u = (x as f32 * ct + y as f32 * st) / period;
            let v = (-(x as f32) * st + y as f32 * ct) / period;
            if (u.floor() as i64 + v.floor() as i64) % 2 == 0 {
                for c in 0..CHANNELS {
                    let p = base.get(c, y, x);
                    base.set(c, y, x, p + alpha * (color[c] - p));
                }
            }
        }
    }
}

fn filtered_noise<R: Rng>(base: &mut Image, rng: &mut R) {
    let mut noise = Image::new(base.height, base.width);
    let dist = Normal::new(0.0f32, 1.0).expect("unit normal");
    for v in &mut noise.data {
        *v = dist.sample(rng);
    }
    let sigma: f64 = rng.random_range(1.0..4.0);
    let size = ((sigma * 3.0).ceil() as usize) * 2 + 1;
    let smooth = gaussian_blur(&noise, size, sigma);
    let amp = rng.random_range(0.3..1.2f32) * sigma as f32;
    for (b, s) in base.data.iter_mut().zip(&smooth.data) {
        *b += amp * s * 0.5;
    }
}

fn shapes<R: Rng>(base: &mut Image, rng: &mut R) {
    let size = base.height.min(base.width) as f32;
    for _ in 0..rng.random_range(2..7) {
        let color = random_color(rng);
        let cy = rng.random_range(0.0..size);
        let cx = rng.random_range(0.0..size);
        let r = rng.random_range(0.08..0.35) * size;
        let circle = rng.random_bool(0.5);
        for y in 0..base.height {
            for x in 0..base.width {
                let (fy, fx) = (y as f32 - cy, x as f32 - cx);
                let inside = if circle {
                    fy * fy + fx * fx <= r * r
                } else {
                    fy.abs() <= r && fx.abs() <= 0.6 * r
                };
                if inside {
                    for c in 0..CHANNELS {
                        base.set(c, y, x, color[c]);
                    }
                }
            }
        }
    }
}

/// One square procedural image; `index` selects the image within the pool.
pub fn procedural_image(size: usize, seed: u64, index: u64) -> Image {
    let mut rng = rng_for(seed, &[index]);
    let mut im = linear_gradient(size, &mut rng);
    match index % 4 {
        0 => shapes(&mut im, &mut rng),
        1 => {
            checkerboard(&mut im, &mut rng);
            shapes(&mut im, &mut rng);
        }
        2 => filtered_noise(&mut im, &mut rng),
        _ => {
            filtered_noise(&mut im, &mut rng);
            shapes(&mut im, &mut rng);
            checkerboard(&mut im, &mut rng);
        }
    }
    im.clamp01();
    im
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_pool_is_deterministic_and_bounded() {
        let src = CleanImageSource::procedural(8, 40);
        let a = src.load_pool(5).unwrap();
        assert_eq!(a, src.load_pool(5).unwrap());
        assert_ne!(a, src.load_pool(6).unwrap());
        for im in &a {
            assert_eq!((im.height, im.width), (40, 40));
            assert!(im.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn directory_source_reads_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let im = procedural_image(16, 1, 1);
        im.to_rgb8().save(dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let pool = CleanImageSource::Directory {
            path: dir.path().to_path_buf(),
        }
        .load_pool(0)
        .unwrap();
        assert_eq!(pool.len(), 1);
        let max = pool[0]
            .data
            .iter()
            .zip(&im.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(max <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = CleanImageSource::Directory {
            path: dir.path().to_path_buf(),
        };
        assert!(src.load_pool(0).is_err());
    }
}
