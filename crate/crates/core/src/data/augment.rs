//! Photometric and geometric augmentation. All randomness comes from the
//! caller's seed; out-of-range parameters are clamped rather than rejected.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Factors are drawn from `[1 - x, 1 + x]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Zoom factors are drawn from `[1 - x, 1 + x]`.
    pub scale: f64,
    /// Standard deviation of additive Gaussian noise, in `[0, 1]` intensity units.
    pub noise_std: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            scale: 0.1,
            noise_std: 0.01,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            scale: 0.0,
            noise_std: 0.0,
        }
    }

    fn clamped(&self) -> Self {
        let frac = |x: f64| if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
        Self {
            hflip_prob: frac(self.hflip_prob),
            vflip_prob: frac(self.vflip_prob),
            brightness: frac(self.brightness),
            contrast: frac(self.contrast),
            saturation: frac(self.saturation),
            scale: self.scale.clamp(0.0, 0.9).max(0.0),
            noise_std: if self.noise_std.is_finite() { self.noise_std.max(0.0) } else { 0.0 },
        }
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    out
}

pub fn vflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, img.height - 1 - y, x);
            }
        }
    }
    out
}

pub fn adjust_brightness(img: &Image, factor: f64) -> Image {
    let f = factor.max(0.0) as f32;
    map(img, |v| v * f)
}

/// Blend towards the mean luminance.
pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    let gray = luminance(img);
    let mean = gray.iter().sum::<f32>() / gray.len().max(1) as f32;
    let f = factor.max(0.0) as f32;
    map(img, |v| mean + f * (v - mean))
}

/// Blend each pixel towards its own luminance.
pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let gray = luminance(img);
    let f = factor.max(0.0) as f32;
    let mut out = img.clone();
    let plane = img.height * img.width;
    for c in 0..3 {
        for (p, g) in gray.iter().enumerate() {
            let v = &mut out.data[c * plane + p];
            *v = (g + f * (*v - g)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Zoom about the centre by `factor` (> 1 enlarges), sampling bilinearly with
/// edge clamping so the output keeps the input size.
pub fn rescale(img: &Image, factor: f64) -> Image {
    let s = factor.clamp(0.1, 10.0);
    if (s - 1.0).abs() < 1e-12 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = img.clone();
    for y in 0..h {
        let sy = ((y as f64 - cy) / s + cy).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..w {
            let sx = ((x as f64 - cx) / s + cx).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for c in 0..img.channels {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bot = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                *out.at_mut(c, y, x) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn add_noise<R: Rng>(img: &Image, std: f64, rng: &mut R) -> Image {
    if std <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
    }
    out
}

fn map(img: &Image, f: impl Fn(f32) -> f32) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = f(*v).clamp(0.0, 1.0));
    out
}

fn luminance(img: &Image) -> Vec<f32> {
    let plane = img.height * img.width;
    if img.channels != 3 {
        return img.data[..plane].to_vec();
    }
    (0..plane)
        .map(|p| 0.299 * img.data[p] + 0.587 * img.data[plane + p] + 0.114 * img.data[2 * plane + p])
        .collect()
}

/// Apply a random draw of `policy` to `img`. Same seed, same output.
pub fn augment(img: &Image, policy: &AugmentPolicy, seed: u64) -> Image {
    let p = policy.clamped();
    let mut rng = rng_for(seed, "augment", &[]);
    let factor = |range: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        if range > 0.0 {
            Some(rng.random_range(1.0 - range..=1.0 + range))
        } else {
            None
        }
    };
    let mut out = img.clone();
    if p.hflip_prob > 0.0 && rng.random_bool(p.hflip_prob) {
        out = hflip(&out);
    }
    if p.vflip_prob > 0.0 && rng.random_bool(p.vflip_prob) {
        out = vflip(&out);
    }
    if let Some(f) = factor(p.scale, &mut rng) {
        out = rescale(&out, f);
    }
    if let Some(f) = factor(p.brightness, &mut rng) {
        out = adjust_brightness(&out, f);
    }
    if let Some(f) = factor(p.contrast, &mut rng) {
        out = adjust_contrast(&out, f);
    }
    if let Some(f) = factor(p.saturation, &mut rng) {
        out = adjust_saturation(&out, f);
    }
    add_noise(&out, p.noise_std, &mut rng)
}
