//! RGB object crops: the unit of input to the auto-encoder and detectors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::wavelet::ImageChannel;

/// Luma weights used for the grayscale reconstruction target (ITU-R BT.601).
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// A 3-channel image with values in `[0, 1]`, stored channel-major `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectImage {
    rgb: Array3<f32>,
}

impl ObjectImage {
    pub fn new(rgb: Array3<f32>) -> Result<Self> {
        let (c, h, w) = rgb.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("image has empty spatial dimensions"));
        }
        if rgb.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("image contains non-finite values"));
        }
        Ok(Self { rgb })
    }

    /// Solid-color image, useful in tests and synthetic data.
    pub fn solid(rgb: [f32; 3], height: usize, width: usize) -> Result<Self> {
        Self::new(Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]))
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let rgb = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        Self::new(rgb)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (_, h, w) = self.rgb.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.rgb[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.rgb
    }

    pub fn height(&self) -> usize {
        self.rgb.dim().1
    }

    pub fn width(&self) -> usize {
        self.rgb.dim().2
    }

    /// (height, width).
    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Axis-aligned pixel crop. The rectangle must lie inside the image and
    /// have positive area.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::shape(format!("degenerate crop {w}×{h}")));
        }
        if x + w > self.width() || y + h > self.height() {
            return Err(Error::shape(format!(
                "crop [{x},{y},{w},{h}] exceeds image bounds {}×{}",
                self.width(),
                self.height()
            )));
        }
        let view = self.rgb.slice(ndarray::s![.., y..y + h, x..x + w]);
        Self::new(view.to_owned())
    }

    /// Bilinear resize to a square `size x size` image.
    pub fn resize(&self, size: usize) -> Result<Self> {
        if self.height() == size && self.width() == size {
            return Ok(self.clone());
        }
        let resized = DynamicImage::ImageRgb8(self.to_rgb8()).resize_exact(
            size as u32,
            size as u32,
            FilterType::Triangle,
        );
        Self::from_rgb8(&resized.to_rgb8())
    }

    /// Luma grayscale, `(H, W)`.
    pub fn grayscale(&self) -> Array2<f32> {
        let (_, h, w) = self.rgb.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            LUMA_WEIGHTS[0] * self.rgb[[0, y, x]]
                + LUMA_WEIGHTS[1] * self.rgb[[1, y, x]]
                + LUMA_WEIGHTS[2] * self.rgb[[2, y, x]]
        })
    }

    /// One channel as a wavelet-module `ImageChannel` (requires even dims).
    pub fn channel(&self, c: usize) -> Result<ImageChannel> {
        if c >= 3 {
            return Err(Error::shape(format!("channel index {c} out of range")));
        }
        let (_, h, w) = self.rgb.dim();
        let px = Array2::from_shape_fn((h, w), |(y, x)| self.rgb[[c, y, x]] as f64);
        ImageChannel::new(px)
    }

    /// Tensor of shape `(3, H, W)` in the given dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, h, w) = self.rgb.dim();
        let data: Vec<f32> = self.rgb.iter().copied().collect();
        let t = Tensor::from_vec(data, (c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Stack images into a `(B, 3, H, W)` batch tensor. All images must share
/// spatial dimensions.
pub fn batch_tensor(images: &[ObjectImage], dtype: DType, device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::data("cannot batch zero images"));
    }
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for (i, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(Error::shape(format!(
                "image {i} is {}x{}, expected {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.pixels().iter().copied());
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Grayscale batch `(B, 1, H, W)`.
pub fn batch_gray_tensor(images: &[ObjectImage], dtype: DType, device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::data("cannot batch zero images"));
    }
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend(img.grayscale().iter().copied());
    }
    let t = Tensor::from_vec(data, (images.len(), 1, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_count_enforced() {
        let err = ObjectImage::new(Array3::zeros((4, 8, 8))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn rgb8_round_trip() {
        let img = ObjectImage::solid([0.2, 0.5, 0.8], 6, 4).unwrap();
        let back = ObjectImage::from_rgb8(&img.to_rgb8()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn grayscale_uses_luma_weights() {
        let img = ObjectImage::solid([1.0, 0.0, 0.0], 2, 2).unwrap();
        let g = img.grayscale();
        assert!((g[[0, 0]] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn batch_requires_equal_shapes() {
        let a = ObjectImage::solid([0.0; 3], 4, 4).unwrap();
        let b = ObjectImage::solid([0.0; 3], 4, 6).unwrap();
        let err = batch_tensor(&[a, b], DType::F32, &Device::Cpu).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
