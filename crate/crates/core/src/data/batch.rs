use candle_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::augment::{augment, AugmentPolicy};
use super::dataset::LabeledImageSet;
use super::image::{stack, Image};
use crate::error::{Error, Result};
use crate::models::InputSize;
use crate::seeding::{derive_seed, rng_for};

/// Shuffled, non-overlapping index batches for one epoch. The order depends
/// only on `(seed, epoch)`.
pub fn batch_iterator(len: usize, batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch size must be at least 2, got {batch_size}")));
    }
    if batch_size > len {
        return Err(Error::invalid(format!("batch size {batch_size} exceeds split size {len}")));
    }
    if batch_size < 3 {
        log::warn!("batch size 2 disables the angle-wise relation term");
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(seed, "shuffle", &[epoch as u64]));
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One augmentation draw: the per-image seed mixes `seed`, `epoch`, the item
/// index and the view number.
#[derive(Debug, Clone, Copy)]
pub struct AugmentDraw<'a> {
    pub policy: &'a AugmentPolicy,
    pub seed: u64,
    pub epoch: usize,
}

impl AugmentDraw<'_> {
    fn item_seed(&self, index: usize, view: usize) -> u64 {
        derive_seed(self.seed, "augment-item", &[self.epoch as u64, index as u64, view as u64])
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `B×C×H×W`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// A split with its images resized to the model input, either held in memory
/// or read from disk per batch.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub set: LabeledImageSet,
    input: InputSize,
    cache: Option<Vec<Image>>,
}

impl SplitData {
    pub fn load(set: LabeledImageSet, input: InputSize, in_memory: bool) -> Result<Self> {
        let mut data = Self { set, input, cache: None };
        if in_memory {
            let images = (0..data.len()).into_par_iter().map(|i| data.read(i)).collect::<Result<Vec<_>>>()?;
            data.cache = Some(images);
        }
        Ok(data)
    }

    /// Wrap images that are already in memory (resized on the way in).
    pub fn from_images(set: LabeledImageSet, images: Vec<Image>, input: InputSize) -> Result<Self> {
        if images.len() != set.len() {
            return Err(Error::invalid("one image per item is required"));
        }
        let images = images.into_iter().map(|im| im.resize(input.height, input.width)).collect();
        Ok(Self { set, input, cache: Some(images) })
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn input(&self) -> InputSize {
        self.input
    }

    fn read(&self, i: usize) -> Result<Image> {
        let img = Image::load(&self.set.items[i].image)?;
        if img.channels != self.input.channels {
            return Err(Error::invalid(format!(
                "{} has {} channels, model expects {}",
                self.set.items[i].image.display(),
                img.channels,
                self.input.channels
            )));
        }
        Ok(img.resize(self.input.height, self.input.width))
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        match &self.cache {
            Some(c) => c
                .get(i)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("index {i} out of range"))),
            None => self.read(i),
        }
    }

    /// Stack the given items, augmenting each when `draw` is set.
    pub fn assemble(&self, indices: &[usize], draw: Option<AugmentDraw<'_>>) -> Result<Batch> {
        let images = indices
            .par_iter()
            .map(|&i| {
                let img = self.image(i)?;
                Ok(match draw {
                    Some(d) => augment(&img, d.policy, d.item_seed(i, 0)),
                    None => img,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            images: stack(&images)?,
            labels: indices.iter().map(|&i| self.set.items[i].label).collect(),
            indices: indices.to_vec(),
        })
    }

    /// `views` augmented copies of each item, rows ordered image-major.
    pub fn assemble_views(&self, indices: &[usize], views: usize, draw: AugmentDraw<'_>) -> Result<Tensor> {
        let jobs: Vec<(usize, usize)> = indices.iter().flat_map(|&i| (1..=views).map(move |v| (i, v))).collect();
        let images = jobs
            .par_iter()
            .map(|&(i, v)| Ok(augment(&self.image(i)?, draw.policy, draw.item_seed(i, v))))
            .collect::<Result<Vec<_>>>()?;
        stack(&images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_batch_kept_or_dropped() {
        let b = batch_iterator(10, 3, 0, 0, false).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let b = batch_iterator(10, 3, 0, 0, true).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3]);
    }

    #[test]
    fn epoch_seeded_and_covering() {
        let a = batch_iterator(37, 5, 9, 2, false).unwrap();
        assert_eq!(a, batch_iterator(37, 5, 9, 2, false).unwrap());
        assert_ne!(a, batch_iterator(37, 5, 9, 3, false).unwrap());
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_batch_sizes() {
        assert!(batch_iterator(5, 6, 0, 0, false).is_err());
        assert!(batch_iterator(5, 1, 0, 0, false).is_err());
    }
}
