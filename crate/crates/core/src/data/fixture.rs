//! Synthetic corpora in the on-disk dataset layout (`images/` + one-hot
//! `manifest.csv`), used by the smoke experiments and tests.
//!
//! Each class draws a textured blob whose hue, stripe orientation and stripe
//! frequency depend on the class; neighbouring classes share some of these
//! cues so the task is not trivially separable at small model sizes.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub classes: usize,
    /// Images per class; a single entry applies to every class.
    pub per_class: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Random hue shift, as a fraction of the gap between class hues.
    pub hue_jitter: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: vec![20],
            height: 16,
            width: 16,
            seed: 0,
            noise: 0.12,
            hue_jitter: 1.2,
        }
    }
}

impl FixtureSpec {
    pub fn counts(&self) -> Result<Vec<usize>> {
        if self.classes < 2 {
            return Err(Error::invalid("a fixture needs at least two classes"));
        }
        match self.per_class.len() {
            1 => Ok(vec![self.per_class[0]; self.classes]),
            n if n == self.classes => Ok(self.per_class.clone()),
            n => Err(Error::invalid(format!("per_class has {n} entries for {} classes", self.classes))),
        }
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Render one image of class `label` out of `classes`.
pub fn render<R: Rng>(label: usize, classes: usize, spec: &FixtureSpec, rng: &mut R) -> Image {
    let (h, w) = (spec.height, spec.width);
    let mut img = Image::filled(3, h, w, 0.0);
    let skin = [0.75 + 0.1 * rng.random::<f64>(), 0.55 + 0.1 * rng.random::<f64>(), 0.45 + 0.1 * rng.random::<f64>()];
    let hue = (label as f64 + spec.hue_jitter * (rng.random::<f64>() - 0.5)) / classes as f64;
    let color = hue_to_rgb(hue);
    let angle = (label % 4) as f64 * PI / 4.0 + 0.3 * (rng.random::<f64>() - 0.5);
    let freq = if label % 2 == 0 { 0.9 } else { 1.6 };
    let (cy, cx) = (
        h as f64 * (0.35 + 0.3 * rng.random::<f64>()),
        w as f64 * (0.35 + 0.3 * rng.random::<f64>()),
    );
    let radius = h.min(w) as f64 * (0.25 + 0.12 * rng.random::<f64>());
    let phase = 2.0 * PI * rng.random::<f64>();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid std");
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r2 = (dy * dy + dx * dx) / (radius * radius);
            let blob = (-r2 * 1.5).exp();
            let stripe = 0.5 + 0.5 * (freq * (dx * ca + dy * sa) + phase).sin();
            for c in 0..3 {
                let lesion = color[c] * (0.55 + 0.45 * stripe);
                let v = skin[c] * (1.0 - blob) + lesion * blob + noise.sample(rng);
                *img.at_mut(c, y, x) = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// In-memory images and labels, class-major order.
pub fn generate(spec: &FixtureSpec) -> Result<(Vec<Image>, Vec<usize>)> {
    let counts = spec.counts()?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let mut rng = rng_for(spec.seed, "fixture", &[c as u64, i as u64]);
            images.push(render(c, spec.classes, spec, &mut rng));
            labels.push(c);
        }
    }
    Ok((images, labels))
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class{c}")).collect()
}

/// Write the corpus under `root` and return per-class counts.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<Vec<usize>> {
    let (images, labels) = generate(spec)?;
    let dir = root.join("images");
    fs::create_dir_all(&dir)?;
    let names = class_names(spec.classes);
    let mut manifest = format!("image,{}\n", names.join(","));
    for (i, (img, &label)) in images.iter().zip(&labels).enumerate() {
        let stem = format!("img_{i:05}");
        img.save_png(&dir.join(format!("{stem}.png")))?;
        manifest.push_str(&stem);
        for c in 0..spec.classes {
            let _ = write!(manifest, ",{}", u8::from(c == label));
        }
        manifest.push('\n');
    }
    fs::write(root.join("manifest.csv"), manifest)?;
    spec.counts()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    #[test]
    fn generated_counts_match_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { per_class: vec![5, 5, 4, 6, 5, 5, 5, 5], ..Default::default() };
        let ledger = write_fixture(dir.path(), &spec).unwrap();
        let ds = load_dataset(dir.path(), &dir.path().join("manifest.csv")).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.counts, ledger);
    }

    #[test]
    fn rendering_is_seeded() {
        let spec = FixtureSpec { per_class: vec![2], classes: 3, ..Default::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = FixtureSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
    }
}
