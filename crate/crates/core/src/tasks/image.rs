use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Planar RGB image with values in [0, 1], stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let idx = (c * self.height + y) * self.width + x;
        self.data[idx] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Image::new(h, w);
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }

    /// Stacks equally sized images into a (batch, 3, h, w) tensor.
    pub fn stack<T: Real>(images: &[&Image]) -> Result<Tensor4<T>> {
        let Some(first) = images.first() else {
            return Err(Error::Shape("cannot stack zero images".into()));
        };
        if images
            .iter()
            .any(|im| im.height != first.height || im.width != first.width)
        {
            return Err(Error::Shape("stacked images differ in size".into()));
        }
        let data = images
            .iter()
            .flat_map(|im| im.data.iter().map(|&v| T::from_f64_lossy(v as f64)))
            .collect();
        Tensor4::from_vec([images.len(), CHANNELS, first.height, first.width], data)
    }

    /// Extracts batch item `b` of a 3-channel tensor.
    pub fn from_tensor<T: Real>(t: &Tensor4<T>, b: usize) -> Result<Image> {
        if t.channels() != CHANNELS {
            return Err(Error::Shape(format!(
                "expected {CHANNELS} channels, got {}",
                t.channels()
            )));
        }
        Image::from_vec(
            t.height(),
            t.width(),
            t.item(b).iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Image::new(h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..CHANNELS {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Places images side by side.
    pub fn hconcat(images: &[&Image]) -> Result<Image> {
        let h = images.first().map_or(0, |im| im.height);
        if images.iter().any(|im| im.height != h) {
            return Err(Error::Shape("hconcat needs equal heights".into()));
        }
        let w: usize = images.iter().map(|im| im.width).sum();
        let mut out = Image::new(h, w);
        let mut x0 = 0;
        for im in images {
            for c in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..im.width {
                        out.set(c, y, x0 + x, im.get(c, y, x));
                    }
                }
            }
            x0 += im.width;
        }
        Ok(out)
    }
}
