//! Planar floating-point images used by augmentation and the encoders.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};

/// A 3-channel image stored channel-major (C×H×W), values nominally in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "planar buffer of {} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Copy a rectangle out of an 8-bit RGB frame.
    pub fn from_rgb_region(src: &RgbImage, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        let (fw, fh) = (src.width() as usize, src.height() as usize);
        if x + w > fw || y + h > fh {
            return Err(Error::Shape(format!(
                "region ({x},{y},{w},{h}) exceeds {fw}x{fh} frame"
            )));
        }
        let mut out = Image::zeros(h, w);
        let raw = src.as_raw();
        for row in 0..h {
            for col in 0..w {
                let base = ((y + row) * fw + (x + col)) * 3;
                for c in 0..CHANNELS {
                    out.data[(c * h + row) * w + col] = f32::from(raw[base + c]);
                }
            }
        }
        Ok(out)
    }

    pub fn from_rgb(src: &RgbImage) -> Self {
        Self::from_rgb_region(src, 0, 0, src.width() as usize, src.height() as usize)
            .expect("full-frame region is always valid")
    }

    /// Round and clamp back to 8-bit RGB.
    pub fn to_rgb(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            for c in 0..CHANNELS {
                let v = self.get(c, y as usize, x as usize);
                px.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb().save(path)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Shape(format!(
                "crop ({x},{y},{w},{h}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Image::zeros(h, w);
        for c in 0..CHANNELS {
            for row in 0..h {
                let src = (c * self.height + y + row) * self.width + x;
                let dst = (c * h + row) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    pub fn center_crop(&self, size: usize) -> Result<Self> {
        if size > self.width || size > self.height {
            return Err(Error::ImageTooSmall {
                width: self.width,
                height: self.height,
                min: size,
            });
        }
        self.crop((self.width - size) / 2, (self.height - size) / 2, size, size)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }
}
