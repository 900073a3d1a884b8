use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassWeights;
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: PathBuf,
    pub label: usize,
    pub metadata: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(items: Vec<Item>, class_names: Vec<String>) -> Result<Self> {
        let mut counts = vec![0; class_names.len()];
        for it in &items {
            *counts
                .get_mut(it.label)
                .ok_or_else(|| Error::invalid(format!("label {} out of range", it.label)))? += 1;
        }
        Ok(Self { items, class_names, counts })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let items: Vec<Item> = indices.iter().map(|&i| self.items[i].clone()).collect();
        Self::new(items, self.class_names.clone()).expect("labels already validated")
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "png", "jpeg", "JPG"];

fn resolve_image(root: &Path, stem: &str) -> Option<PathBuf> {
    for dir in [root.join("images"), root.to_path_buf()] {
        for ext in IMAGE_EXTENSIONS {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

/// Read a one-hot ground-truth manifest (`image,<class_1>,...,<class_C>`).
///
/// Row numbers in errors are 1-based line numbers of the manifest, the
/// header being line 1.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<LabeledImageSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::Load {
            path: manifest.to_path_buf(),
            reason: e.to_string(),
        })?;
    let header = reader
        .headers()
        .map_err(|e| Error::MalformedManifest { row: 1, reason: e.to_string() })?
        .clone();
    if header.len() < 3 || !header[0].eq_ignore_ascii_case("image") {
        return Err(Error::MalformedManifest {
            row: 1,
            reason: "header must be `image,<class_1>,...,<class_C>` with at least two classes".into(),
        });
    }
    let class_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut items = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedManifest { row, reason: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(Error::MalformedManifest {
                row,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let mut label = None;
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::MalformedManifest {
                row,
                reason: format!("`{field}` is not a number"),
            })?;
            if v == 1.0 {
                if label.replace(c).is_some() {
                    return Err(Error::MalformedManifest { row, reason: "more than one class marked".into() });
                }
            } else if v != 0.0 {
                return Err(Error::MalformedManifest { row, reason: format!("one-hot entry `{field}` is neither 0 nor 1") });
            }
        }
        let label = label.ok_or(Error::MalformedManifest { row, reason: "no class marked".into() })?;
        let stem = &rec[0];
        let image = resolve_image(root, stem).ok_or_else(|| Error::Load {
            path: root.join("images").join(format!("{stem}.jpg|png")),
            reason: format!("image `{stem}` not found"),
        })?;
        items.push(Item { image, label, metadata: None });
    }
    LabeledImageSet::new(items, class_names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    /// Share of the non-test items used for training; the rest validates.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test_fraction: 0.10, train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_ITEMS: usize = 10;

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    for (name, f) in [("test_fraction", spec.test_fraction), ("train_fraction", spec.train_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid(format!("{name} must lie in (0, 1), got {f}")));
        }
    }
    if n < MIN_SPLIT_ITEMS {
        return Err(Error::invalid(format!("need at least {MIN_SPLIT_ITEMS} items to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(spec.seed, "split", &[]));
    let n_test = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 2);
    let rest = n - n_test;
    let n_train = ((rest as f64 * spec.train_fraction).round() as usize).clamp(1, rest - 1);
    let test = order[..n_test].to_vec();
    let train = order[n_test..n_test + n_train].to_vec();
    let val = order[n_test + n_train..].to_vec();
    Ok(SplitIndices { train, val, test })
}

/// Per-image random partition into `(train, val, test)`.
pub fn split_dataset(ds: &LabeledImageSet, spec: &SplitSpec) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    let idx = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.val), ds.subset(&idx.test)))
}

pub fn class_weights(ds: &LabeledImageSet) -> Result<ClassWeights> {
    ClassWeights::from_counts(&ds.counts, Some(&ds.class_names))
}
