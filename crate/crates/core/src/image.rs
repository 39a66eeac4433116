//! RGB float images in `[0, 1]`, row-major with interleaved channels.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::validation(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * CHANNELS
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Center crop to `size × size`, rounding the offset like torchvision.
    pub fn center_crop(&self, size: usize) -> Result<Image> {
        if size == 0 || size > self.height || size > self.width {
            return Err(Error::validation(format!(
                "cannot crop {size}×{size} from {}×{}",
                self.height, self.width
            )));
        }
        let top = ((self.height - size) as f64 / 2.0).round() as usize;
        let left = ((self.width - size) as f64 / 2.0).round() as usize;
        Ok(Image::from_fn(size, size, |y, x, c| self.get(y + top, x + left, c)))
    }

    /// Loads PNG or binary PPM, scaling 8-bit values to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let format = image::guess_format(&bytes).map_err(|e| Error::format(path, e))?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
            return Err(Error::format(path, format!("unsupported image format {format:?}")));
        }
        let rgb = image::load_from_memory_with_format(&bytes, format)
            .map_err(|e| Error::format(path, e))?
            .to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Image {
        let (w, h) = rgb.dimensions();
        Image {
            height: h as usize,
            width: w as usize,
            data: rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    /// Saves as PNG or PPM depending on the extension (`.ppm`/`.pnm` → PPM P6).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        let rgb = self.to_rgb8();
        match ext.as_str() {
            "png" => rgb.save_with_format(path, ImageFormat::Png),
            "ppm" | "pnm" => rgb.save_with_format(path, ImageFormat::Pnm),
            _ => return Err(Error::format(path, "output must be .png or .ppm")),
        }
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other),
        })
    }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::validation("PSNR of differently sized images"));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 255.0);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            let back = Image::load(&p).unwrap();
            assert_eq!(back.height(), 5);
            assert_eq!(back.width(), 7);
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(img.save(dir.path().join("a.jpg")).is_err());
    }

    #[test]
    fn crop_is_centered() {
        let img = Image::from_fn(6, 6, |y, x, _| (y * 6 + x) as f32);
        let c = img.center_crop(2).unwrap();
        assert_eq!(c.get(0, 0, 0), 14.0);
        assert!(img.center_crop(7).is_err());
    }
}
