use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::ops::interpolation_matrix;

/// Planar (channel-major) image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {channels}×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
            }
        }
        Self::new(3, h, w, data)
    }

    /// 8-bit RGB (or grayscale for single-channel images) PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| image::Luma([q(self.at(0, y as usize, x as usize))])).save(path)?,
            3 => image::RgbImage::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([q(self.at(0, y, x)), q(self.at(1, y, x)), q(self.at(2, y, x))])
            })
            .save(path)?,
            c => return Err(Error::invalid(format!("cannot encode a {c}-channel image"))),
        }
        Ok(())
    }

    /// Bilinear resample with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mh = interpolation_matrix(self.height, height);
        let mw = interpolation_matrix(self.width, width);
        let mut out = Self::filled(self.channels, height, width, 0.0);
        let mut rows = vec![0f64; height * self.width];
        for c in 0..self.channels {
            rows.iter_mut().for_each(|v| *v = 0.0);
            for oy in 0..height {
                for iy in 0..self.height {
                    let wgt = mh[oy * self.height + iy];
                    if wgt != 0.0 {
                        for x in 0..self.width {
                            rows[oy * self.width + x] += wgt * f64::from(self.at(c, iy, x));
                        }
                    }
                }
            }
            for oy in 0..height {
                for ox in 0..width {
                    let mut acc = 0.0;
                    for ix in 0..self.width {
                        acc += mw[ox * self.width + ix] * rows[oy * self.width + ix];
                    }
                    *out.at_mut(c, oy, ox) = acc as f32;
                }
            }
        }
        out
    }
}

/// Stack same-sized images into a `B×C×H×W` tensor.
pub fn stack(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("cannot stack zero images"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::invalid("images in a batch must share their shape"));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(3, 5, 7, 0.25);
        let r = img.resize(3, 4);
        assert!(r.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
        assert_eq!(img.resize(5, 7), img);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f32> = (0..3 * 4 * 4).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Image::new(3, 4, 4, data).unwrap();
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!((back.height, back.width), (4, 4));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }
}
