//! Feature maps: a built-in deterministic per-pixel descriptor standing in
//! for an offline MVS feature network, bilinear sampling, and similarity
//! metrics. Externally computed maps can be ingested through the FMAP file
//! format (see [`crate::io::fmap`]).

use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty image")]
    EmptyImage,
    #[error("image too small: {0}x{1}, need at least 16x16")]
    TooSmall(usize, usize),
    #[error("invalid scale factor {0}; must be 1, 1/2, or 1/4")]
    BadScale(f64),
    #[error("non-finite value in feature map at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },
}

/// Dense per-pixel descriptor grid. `scale` relates map coordinates to
/// image pixel coordinates: `map_px = image_px * scale`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    /// Channel-major: data[c * width*height + y*width + x].
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        width: usize,
        height: usize,
        scale: f64,
        data: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if !matches!(scale, s if (s - 1.0).abs() < 1e-9 || (s - 0.5).abs() < 1e-9 || (s - 0.25).abs() < 1e-9)
        {
            return Err(FeatureError::BadScale(scale));
        }
        assert_eq!(data.len(), channels * width * height, "payload size mismatch");
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(FeatureError::NonFinite {
                    channel: i / (width * height),
                    index: i % (width * height),
                });
            }
        }
        Ok(FeatureMap { channels, width, height, scale, data })
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    /// Bilinear sample at an *image-space* pixel; converts by the scale
    /// factor first. `None` beyond a half-pixel border of the map.
    pub fn sample_image_pixel(&self, image_pixel: &Vector2<f64>) -> Option<Vec<f64>> {
        self.sample(&(image_pixel * self.scale))
    }

    /// Bilinear sample at map coordinates. Exact at integer pixel centers.
    /// `None` (out of view) beyond a half-pixel border.
    pub fn sample(&self, pixel: &Vector2<f64>) -> Option<Vec<f64>> {
        let (w, h) = (self.width as f64, self.height as f64);
        if pixel.x < -0.5 || pixel.x > w - 0.5 || pixel.y < -0.5 || pixel.y > h - 0.5 {
            return None;
        }
        let x0 = pixel.x.floor().clamp(0.0, w - 1.0);
        let y0 = pixel.y.floor().clamp(0.0, h - 1.0);
        let x1 = (x0 + 1.0).min(w - 1.0);
        let y1 = (y0 + 1.0).min(h - 1.0);
        let fx = (pixel.x - x0).clamp(0.0, 1.0);
        let fy = (pixel.y - y0).clamp(0.0, 1.0);
        let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
        let mut out = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let v00 = self.at(c, x0, y0) as f64;
            let v10 = self.at(c, x1, y0) as f64;
            let v01 = self.at(c, x0, y1) as f64;
            let v11 = self.at(c, x1, y1) as f64;
            let v = v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy;
            out.push(v);
        }
        Some(out)
    }
}

/// Similarity metric between feature vectors. L1/L2 report negative
/// distances so that larger is always more similar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    NegL1,
    NegL2,
}

pub const COSINE_EPS: f64 = 1e-8;

/// a.b / (|a||b| + eps); 0 when either norm is below eps. Not clamped.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    dot / (na * nb + COSINE_EPS)
}

pub fn similarity(metric: Similarity, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Similarity::Cosine => cosine_similarity(a, b),
        Similarity::NegL1 => {
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            -s / a.len() as f64
        }
        Similarity::NegL2 => {
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            -s.sqrt()
        }
    }
}

/// Configuration for the built-in descriptor.
#[derive(Debug, Clone)]
pub struct DescriptorConfig {
    /// Output map scale relative to the image: 1, 1/2, or 1/4.
    pub scale: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig { scale: 0.5 }
    }
}

/// Number of channels produced by [`extract_features`]:
/// 2 pyramid scales x (intensity + 2 gradients + 9 patch-normalized).
pub const DESCRIPTOR_CHANNELS: usize = 24;

/// Deterministic per-pixel descriptor: at each of 2 Gaussian-pyramid
/// scales, per-pixel intensity, x/y gradients, and the 3x3 patch of
/// mean-normalized intensities, upsampled to the output resolution and
/// concatenated. Each channel is shifted to zero mean.
pub fn extract_features(
    gray: &[f32],
    width: usize,
    height: usize,
    config: &DescriptorConfig,
) -> Result<FeatureMap, FeatureError> {
    if width == 0 || height == 0 || gray.is_empty() {
        return Err(FeatureError::EmptyImage);
    }
    if width < 16 || height < 16 {
        return Err(FeatureError::TooSmall(width, height));
    }
    let scale = config.scale;
    if !((scale - 1.0).abs() < 1e-9 || (scale - 0.5).abs() < 1e-9 || (scale - 0.25).abs() < 1e-9) {
        return Err(FeatureError::BadScale(scale));
    }
    let out_w = ((width as f64) * scale).round() as usize;
    let out_h = ((height as f64) * scale).round() as usize;

    let level0 = gray.to_vec();
    let level1 = downsample2(&blur3(&level0, width, height), width, height);
    let (w1, h1) = (width.div_ceil(2), height.div_ceil(2));

    let mut data = vec![0f32; DESCRIPTOR_CHANNELS * out_w * out_h];
    let plane = out_w * out_h;
    let mut chan = 0usize;
    for (img, iw, ih) in [(&level0, width, height), (&level1, w1, h1)] {
        let chans = per_pixel_channels(img, iw, ih);
        // resample each of the 12 channels to the output grid
        for src in chans.iter() {
            let dst = &mut data[chan * plane..(chan + 1) * plane];
            resample_nearest(src, iw, ih, dst, out_w, out_h);
            chan += 1;
        }
    }
    // zero-mean per channel
    for c in 0..DESCRIPTOR_CHANNELS {
        let sl = &mut data[c * plane..(c + 1) * plane];
        let mean = sl.iter().map(|v| *v as f64).sum::<f64>() / plane as f64;
        for v in sl.iter_mut() {
            *v -= mean as f32;
        }
    }
    FeatureMap::new(DESCRIPTOR_CHANNELS, out_w, out_h, scale, data)
}

/// 12 channels at the source resolution: intensity, gx, gy, 9 patch-mean-
/// normalized intensities. Gradients are central differences with clamped
/// borders; the patch channels subtract the 3x3 mean.
fn per_pixel_channels(img: &[f32], w: usize, h: usize) -> Vec<Vec<f32>> {
    let mut out = vec![vec![0f32; w * h]; 12];
    let get = |x: isize, y: isize| -> f32 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        img[y * w + x]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            out[0][i] = get(x, y);
            out[1][i] = 0.5 * (get(x + 1, y) - get(x - 1, y));
            out[2][i] = 0.5 * (get(x, y + 1) - get(x, y - 1));
            let mut patch = [0f32; 9];
            let mut mean = 0f32;
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    patch[k] = get(x + dx, y + dy);
                    mean += patch[k];
                    k += 1;
                }
            }
            mean /= 9.0;
            for (k, p) in patch.iter().enumerate() {
                out[3 + k][i] = p - mean;
            }
        }
    }
    out
}

fn blur3(img: &[f32], w: usize, h: usize) -> Vec<f32> {
    // separable 1-2-1 binomial
    let get = |buf: &[f32], x: isize, y: isize| -> f32 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        buf[y * w + x]
    };
    let mut tmp = vec![0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            tmp[y as usize * w + x as usize] =
                0.25 * (get(img, x - 1, y) + 2.0 * get(img, x, y) + get(img, x + 1, y));
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] =
                0.25 * (get(&tmp, x, y - 1) + 2.0 * get(&tmp, x, y) + get(&tmp, x, y + 1));
        }
    }
    out
}

fn downsample2(img: &[f32], w: usize, h: usize) -> Vec<f32> {
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = vec![0f32; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = img[(y * 2).min(h - 1) * w + (x * 2).min(w - 1)];
        }
    }
    out
}

fn resample_nearest(src: &[f32], sw: usize, sh: usize, dst: &mut [f32], dw: usize, dh: usize) {
    if sw == dw && sh == dh {
        dst.copy_from_slice(src);
        return;
    }
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5)
            .round()
            .clamp(0.0, sh as f64 - 1.0) as usize;
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5)
                .round()
                .clamp(0.0, sw as f64 - 1.0) as usize;
            dst[y * dw + x] = src[sy * sw + sx];
        }
    }
}

/// RGB (interleaved, [0,1]) to grayscale.
pub fn rgb_to_gray(rgb: &[f32], width: usize, height: usize) -> Vec<f32> {
    assert_eq!(rgb.len(), width * height * 3);
    (0..width * height)
        .map(|i| 0.299 * rgb[3 * i] + 0.587 * rgb[3 * i + 1] + 0.114 * rgb[3 * i + 2])
        .collect()
}
