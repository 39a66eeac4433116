//! Low-resolution simulation.
//!
//! Bicubic resampling uses the Keys cubic convolution kernel with `a = −0.5`,
//! half-pixel centres (`src = (dst + 0.5) · in/out − 0.5`) and clamped edge
//! sampling. Without antialiasing the kernel keeps its 4-tap support even when
//! downsampling. Output is clamped to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn keys_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps and weights for one output coordinate.
#[derive(Debug, Clone)]
struct Taps {
    start: isize,
    weights: Vec<f64>,
}

fn axis_taps(in_len: usize, out_len: usize, antialias: bool) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = if antialias && scale > 1.0 { scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale - 0.5;
            let start = (centre - support).ceil() as isize;
            let end = (centre + support).floor() as isize;
            let mut weights: Vec<f64> = (start..=end)
                .map(|t| keys_kernel((centre - t as f64) / stretch, KEYS_A))
                .collect();
            if antialias {
                let sum: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= sum);
            }
            Taps { start, weights }
        })
        .collect()
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    resize(img, out_h, out_w, false)
}

/// Bicubic resize, optionally widening the kernel by the downscale factor.
pub fn resize(img: &Image, out_h: usize, out_w: usize, antialias: bool) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::validation("output size must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    if (h, w) == (out_h, out_w) {
        // half-pixel mapping at scale 1 hits integer taps: W(0) = 1, W(±1) = W(2) = 0
        let mut out = img.clone();
        out.clamp_unit();
        return Ok(out);
    }
    let xt = axis_taps(w, out_w, antialias);
    let yt = axis_taps(h, out_h, antialias);

    // horizontal pass, unclamped
    let mut tmp = vec![0.0f64; h * out_w * CHANNELS];
    for y in 0..h {
        for (ox, taps) in xt.iter().enumerate() {
            let mut acc = [0.0f64; CHANNELS];
            for (k, wgt) in taps.weights.iter().enumerate() {
                let sx = clamp_index(taps.start + k as isize, w);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wgt * f64::from(img.get(y, sx, c));
                }
            }
            tmp[(y * out_w + ox) * CHANNELS..][..CHANNELS].copy_from_slice(&acc);
        }
    }

    let mut out = vec![0.0f32; out_h * out_w * CHANNELS];
    for (oy, taps) in yt.iter().enumerate() {
        for ox in 0..out_w {
            let mut acc = [0.0f64; CHANNELS];
            for (k, wgt) in taps.weights.iter().enumerate() {
                let sy = clamp_index(taps.start + k as isize, h);
                let src = &tmp[(sy * out_w + ox) * CHANNELS..][..CHANNELS];
                for c in 0..CHANNELS {
                    acc[c] += wgt * src[c];
                }
            }
            for c in 0..CHANNELS {
                out[(oy * out_w + ox) * CHANNELS + c] = acc[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(out_h, out_w, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub low_res: usize,
    pub model_res: usize,
    /// Center-crop side; defaults to `model_res`.
    #[serde(default)]
    pub crop: Option<usize>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(default)]
    pub antialias: bool,
}

/// CLIP normalization constants.
#[allow(clippy::excessive_precision)]
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
#[allow(clippy::excessive_precision)]
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

impl PreprocessSpec {
    pub fn new(low_res: usize, model_res: usize) -> Self {
        PreprocessSpec {
            low_res,
            model_res,
            crop: None,
            mean: CLIP_MEAN,
            std: CLIP_STD,
            antialias: false,
        }
    }

    /// Identity normalization.
    pub fn unnormalized(low_res: usize, model_res: usize) -> Self {
        PreprocessSpec {
            mean: [0.0; 3],
            std: [1.0; 3],
            ..Self::new(low_res, model_res)
        }
    }

    pub fn crop_size(&self) -> usize {
        self.crop.unwrap_or(self.model_res)
    }

    pub fn validate(&self) -> Result<()> {
        if self.low_res == 0 || self.model_res == 0 {
            return Err(Error::validation("resolutions must be positive"));
        }
        if self.crop_size() == 0 || self.crop_size() > self.model_res {
            return Err(Error::validation(format!(
                "crop {} must be in 1..={}",
                self.crop_size(),
                self.model_res
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::validation("normalization std must be strictly positive"));
        }
        Ok(())
    }
}

/// Channel-first normalized tensor, ready for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Resize to `n × n`, back up to the model resolution, then center-crop.
pub fn degrade(img: &Image, spec: &PreprocessSpec) -> Result<Image> {
    spec.validate()?;
    let low = resize(img, spec.low_res, spec.low_res, spec.antialias)?;
    let up = resize(&low, spec.model_res, spec.model_res, spec.antialias)?;
    up.center_crop(spec.crop_size())
}

pub fn normalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Tensor {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0f32; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = (img.get(y, x, c) - mean[c]) / std[c];
            }
        }
    }
    Tensor {
        channels: CHANNELS,
        height: h,
        width: w,
        data,
    }
}

/// Full two-stage pipeline followed by per-channel normalization.
pub fn degrade_pipeline(img: &Image, spec: &PreprocessSpec) -> Result<Tensor> {
    Ok(normalize(&degrade(img, spec)?, spec.mean, spec.std))
}
