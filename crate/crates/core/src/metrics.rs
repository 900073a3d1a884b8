//! Accuracy, balanced accuracy, macro one-vs-rest ROC-AUC and macro mean
//! average precision over exported score matrices.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{stack, Image, SplitData};
use crate::error::{Error, Result};
use crate::models::{Mode, Model};
use crate::ops;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::invalid("predictions and labels differ in length"));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(Error::invalid(format!("class index out of range for {classes} classes")));
            }
            counts[y][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Per-class recall; `None` for classes without samples.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(i, &n)| (n > 0).then(|| self.counts[i][i] as f64 / n as f64))
            .collect()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean recall over classes with at least one sample.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = cm.recalls().into_iter().flatten().collect();
    if recalls.is_empty() {
        return Err(Error::invalid("balanced accuracy of an all-zero confusion matrix"));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("empty score matrix"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    let c = scores[0].len();
    if c < 2 || scores.iter().any(|r| r.len() != c) {
        return Err(Error::invalid("score rows must share a width of at least 2"));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok(c)
}

/// One-vs-rest ROC of class `c`: points from `(0,0)` to `(1,1)` by
/// lowering the threshold through each unique score. `None` when the class
/// has no positives or no negatives.
pub fn roc_curve(scores: &[Vec<f64>], labels: &[usize], c: usize) -> Option<Vec<(f64, f64)>> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(r, &y)| (r[c], y == c)).collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Some(points)
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocSummary {
    pub auc_macro: f64,
    pub per_class: Vec<Option<f64>>,
    pub points: Vec<Vec<(f64, f64)>>,
}

/// Macro-averaged one-vs-rest AUC. Classes without positives (or
/// negatives) are excluded with a warning.
pub fn roc_auc_macro(scores: &[Vec<f64>], labels: &[usize]) -> Result<RocSummary> {
    let c = check_scores(scores, labels)?;
    let mut per_class = Vec::with_capacity(c);
    let mut points = Vec::with_capacity(c);
    for k in 0..c {
        match roc_curve(scores, labels, k) {
            Some(p) => {
                per_class.push(Some(trapezoid(&p)));
                points.push(p);
            }
            None => {
                log::warn!("class {k} excluded from AUC: it lacks positives or negatives");
                per_class.push(None);
                points.push(Vec::new());
            }
        }
    }
    let auc_macro = macro_mean(&per_class).ok_or_else(|| Error::invalid("no class is eligible for AUC"))?;
    Ok(RocSummary { auc_macro, per_class, points })
}

/// Average precision of class `c`: the precision at the rank of each
/// positive in the descending score order (stable on ties), averaged.
pub fn average_precision(scores: &[Vec<f64>], labels: &[usize], c: usize) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == c {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Option<f64>>)> {
    let c = check_scores(scores, labels)?;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let ap = average_precision(scores, labels, k);
            if ap.is_none() {
                log::warn!("class {k} excluded from mAP: no positives");
            }
            ap
        })
        .collect();
    let map = macro_mean(&per_class).ok_or_else(|| Error::invalid("no class has positives"))?;
    Ok((map, per_class))
}

fn macro_mean(v: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub recall: Vec<Option<f64>>,
    pub ap: Vec<Option<f64>>,
    pub auc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub samples: usize,
    pub acc: f64,
    pub bacc: f64,
    pub auc_macro: f64,
    pub map_macro: f64,
    pub per_class: PerClass,
    pub confusion: ConfusionMatrix,
    pub roc_points: Vec<Vec<(f64, f64)>>,
    /// Classes left out of BACC/AUC/mAP because they are absent from the split.
    pub excluded_classes: Vec<usize>,
}

impl MetricsReport {
    /// Report from class probabilities (rows) and true labels.
    pub fn from_scores(scores: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> Result<Self> {
        let c = check_scores(scores, labels)?;
        if class_names.len() != c {
            return Err(Error::invalid(format!("{} class names for {c} score columns", class_names.len())));
        }
        let predictions: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
        let confusion = ConfusionMatrix::new(&predictions, labels, c)?;
        let roc = roc_auc_macro(scores, labels)?;
        let (map_macro, ap) = mean_average_precision(scores, labels)?;
        let recall = confusion.recalls();
        let excluded_classes = (0..c).filter(|&k| recall[k].is_none() || roc.per_class[k].is_none()).collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            class_names: class_names.to_vec(),
            samples: labels.len(),
            acc: accuracy(&confusion)?,
            bacc: balanced_accuracy(&confusion)?,
            auc_macro: roc.auc_macro,
            map_macro,
            per_class: PerClass { recall, ap, auc: roc.per_class },
            confusion,
            roc_points: roc.points,
            excluded_classes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        let report: Self = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::VersionMismatch { found: report.schema_version, expected: REPORT_SCHEMA_VERSION });
        }
        Ok(report)
    }
}

/// Softmax probabilities (`T = 1`) of `model` over `split`, in split order.
pub fn predict_scores(model: &Model, split: &SplitData, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut scores = Vec::with_capacity(split.len());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = split.assemble(chunk, None)?;
        let taps = model.forward_with_taps(&batch.images, Mode::Eval)?;
        scores.extend(probabilities(&taps.logits)?);
    }
    Ok(scores)
}

/// Softmax probabilities for loose images, each resized to the model input.
pub fn predict_images(model: &Model, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let input = model.spec().input_size;
    if let Some(bad) = images.iter().find(|im| im.channels != input.channels) {
        return Err(Error::invalid(format!("image has {} channels, model expects {}", bad.channels, input.channels)));
    }
    let resized: Vec<Image> = images.iter().map(|im| im.resize(input.height, input.width)).collect();
    let taps = model.forward_with_taps(&stack(&resized)?, Mode::Eval)?;
    probabilities(&taps.logits)
}

pub(crate) fn probabilities(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(ops::softmax(&logits.to_dtype(candle_core::DType::F64)?)?.to_vec2()?)
}

pub fn evaluate(model: &Model, split: &SplitData, batch_size: usize) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let scores = predict_scores(model, split, batch_size)?;
    MetricsReport::from_scores(&scores, &split.set.labels(), &split.set.class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusions() {
        let cm = ConfusionMatrix { counts: vec![vec![8, 2], vec![1, 9]] };
        assert!((balanced_accuracy(&cm).unwrap() - 0.85).abs() < 1e-12);
        let cm = ConfusionMatrix { counts: vec![vec![5, 5], vec![5, 5]] };
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.5);
        let zero = ConfusionMatrix { counts: vec![vec![0, 0], vec![0, 0]] };
        assert!(balanced_accuracy(&zero).is_err());
    }

    #[test]
    fn constant_predictor_on_imbalanced_counts() {
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
        let cm = ConfusionMatrix::new(&[0; 10], &labels, 2).unwrap();
        assert!((accuracy(&cm).unwrap() - 0.9).abs() < 1e-12);
        assert!((balanced_accuracy(&cm).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3], vec![0.1, 0.9]];
        let labels = [0, 1, 0, 1];
        let names = vec!["a".to_string(), "b".to_string()];
        let r = MetricsReport::from_scores(&scores, &labels, &names).unwrap();
        assert_eq!((r.acc, r.bacc, r.auc_macro, r.map_macro), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.confusion.counts, vec![vec![2, 0], vec![0, 2]]);
    }

    #[test]
    fn single_positive_last() {
        let n = 7;
        let scores: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0 - i as f64 / n as f64, i as f64 / n as f64]).collect();
        let mut labels = vec![1; n];
        labels[n - 1] = 0;
        assert!((average_precision(&scores, &labels, 0).unwrap() - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn ties_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn absent_class_excluded() {
        let scores = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.7, 0.1], vec![0.5, 0.4, 0.1]];
        let labels = [0, 1, 0];
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = MetricsReport::from_scores(&scores, &labels, &names).unwrap();
        assert_eq!(r.excluded_classes, vec![2]);
        assert_eq!(r.per_class.auc[2], None);
        assert_eq!(r.bacc, 1.0);
    }
}
