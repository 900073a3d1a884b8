//! Distillation objectives. Every function returns a rank-0 tensor so callers
//! can backpropagate through it; teacher-side inputs are detached internally.
//!
//! All batch sums are mean-reduced (divided by the number of summed
//! instances) so the weights in [`LossWeights`] do not depend on batch size.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelTaps;
use crate::ops;
use crate::relations::{
    angle_potential, channel_relation_matrix, check_embeddings, check_features, check_logits,
    check_temperature, distance_potential,
};

/// Per-class weights for the weighted cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    /// Inverse-frequency weights `w_c = N / (C * n_c)`; their mean over the
    /// training samples is 1.
    pub fn from_counts(counts: &[usize], class_names: Option<&[String]>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid("class weights need at least two classes"));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            let name = class_names
                .and_then(|n| n.get(c).cloned())
                .unwrap_or_else(|| format!("#{c}"));
            return Err(Error::invalid(format!("class {name} has no training samples")));
        }
        let n: usize = counts.iter().sum();
        let c = counts.len() as f64;
        let weights = counts.iter().map(|&nc| n as f64 / (c * nc as f64)).collect();
        Ok(Self { weights })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("class weights must be at least two positive finite values"));
        }
        Ok(Self { weights })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Share of the soft KL term inside BLKD.
    pub lambda_kd: f64,
    pub temperature: f64,
    pub lambda_d: f64,
    pub lambda_a: f64,
    pub huber_delta: f64,
    pub lambda_blkd: f64,
    pub lambda_drkd: f64,
    pub lambda_crkd: f64,
    pub lambda_sskd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kd: 0.9,
            temperature: 4.0,
            lambda_d: 1.0,
            lambda_a: 2.0,
            huber_delta: 1.0,
            lambda_blkd: 1.0,
            lambda_drkd: 1.0,
            lambda_crkd: 1000.0,
            lambda_sskd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_kd", self.lambda_kd),
            ("temperature", self.temperature),
            ("lambda_d", self.lambda_d),
            ("lambda_a", self.lambda_a),
            ("huber_delta", self.huber_delta),
            ("lambda_blkd", self.lambda_blkd),
            ("lambda_drkd", self.lambda_drkd),
            ("lambda_crkd", self.lambda_crkd),
            ("lambda_sskd", self.lambda_sskd),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.lambda_kd > 1.0 {
            return Err(Error::Config(format!("lambda_kd must lie in [0, 1], got {}", self.lambda_kd)));
        }
        if self.temperature <= 0.0 || self.huber_delta <= 0.0 {
            return Err(Error::Config("temperature and huber_delta must be positive".into()));
        }
        Ok(())
    }
}

/// Projections of `views` augmented copies of each image, rows ordered
/// image-major (`row = image * views + view`).
#[derive(Debug, Clone)]
pub struct SelfSupervisionBatch {
    pub projections: Tensor,
    pub views: usize,
    pub temperature: f64,
}

impl SelfSupervisionBatch {
    fn check(&self) -> Result<(usize, usize)> {
        if self.views < 2 {
            return Err(Error::invalid(format!("need at least 2 views, got {}", self.views)));
        }
        check_temperature(self.temperature)?;
        let (n, p) = self.projections.dims2().map_err(|_| {
            Error::invalid(format!("projections must be 2-D, got {:?}", self.projections.dims()))
        })?;
        if n % self.views != 0 {
            return Err(Error::invalid(format!("{n} projection rows do not split into {} views", self.views)));
        }
        ops::ensure_finite(&self.projections, "projections")?;
        Ok((n, p))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "{what}: teacher shape {:?} != student shape {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn label_tensor(labels: &[usize], classes: usize, t: &Tensor) -> Result<Tensor> {
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let ids: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    Ok(Tensor::from_vec(ids, labels.len(), t.device())?)
}

/// Temperature-scaled KL divergence from teacher to student soft targets,
/// multiplied by `T²`.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    same_shape(teacher_logits, student_logits, "kd_loss")?;
    check_logits(teacher_logits)?;
    let (b, _) = check_logits(student_logits)?;
    check_temperature(temperature)?;
    let inv_t = 1.0 / temperature;
    let log_pt = ops::log_softmax(&teacher_logits.detach().affine(inv_t, 0.0)?)?;
    let log_ps = ops::log_softmax(&student_logits.affine(inv_t, 0.0)?)?;
    let kl = log_pt.exp()?.mul(&(log_pt - log_ps)?)?.sum_all()?;
    Ok(kl.affine(temperature * temperature / b as f64, 0.0)?)
}

pub fn weighted_cross_entropy(student_logits: &Tensor, labels: &[usize], weights: &ClassWeights) -> Result<Tensor> {
    let (b, c) = check_logits(student_logits)?;
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if weights.len() != c {
        return Err(Error::invalid(format!("{} class weights for {c} classes", weights.len())));
    }
    let ids = label_tensor(labels, c, student_logits)?;
    let log_p = ops::log_softmax(student_logits)?;
    let picked = log_p.gather(&ids.unsqueeze(1)?, 1)?.squeeze(1)?;
    let w: Vec<f64> = labels.iter().map(|&y| weights.as_slice()[y]).collect();
    let w = Tensor::from_vec(w, b, student_logits.device())?.to_dtype(student_logits.dtype())?;
    Ok(picked.mul(&w)?.sum_all()?.affine(-1.0 / b as f64, 0.0)?)
}

pub fn blkd_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    labels: &[usize],
    weights: &ClassWeights,
    lw: &LossWeights,
) -> Result<Tensor> {
    Ok(blkd_parts(teacher_logits, student_logits, labels, weights, lw)?.2)
}

/// `(wce, kd, (1 - λ_kd)·wce + λ_kd·kd)`
fn blkd_parts(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    labels: &[usize],
    weights: &ClassWeights,
    lw: &LossWeights,
) -> Result<(Tensor, Tensor, Tensor)> {
    let wce = weighted_cross_entropy(student_logits, labels, weights)?;
    let kd = kd_loss(teacher_logits, student_logits, lw.temperature)?;
    let total = (wce.affine(1.0 - lw.lambda_kd, 0.0)? + kd.affine(lw.lambda_kd, 0.0)?)?;
    Ok((wce, kd, total))
}

/// Huber-matched distance potentials (mean over ordered distinct pairs) and
/// angle potentials (mean over ordered distinct, non-degenerate triples).
pub fn drkd_loss(teacher_embeddings: &Tensor, student_embeddings: &Tensor, lw: &LossWeights) -> Result<Tensor> {
    let (bt, _) = check_embeddings(teacher_embeddings)?;
    let (b, _) = check_embeddings(student_embeddings)?;
    if bt != b {
        return Err(Error::invalid(format!("drkd_loss: teacher batch {bt} != student batch {b}")));
    }
    if b < 2 {
        return Err(Error::invalid(format!("drkd_loss needs B >= 2, got {b}")));
    }
    let dtype = student_embeddings.dtype();
    let teacher = teacher_embeddings.detach().to_dtype(dtype)?;

    let dt = distance_potential(&teacher)?.values;
    let ds = distance_potential(student_embeddings)?.values;
    let dist_term = ops::huber(&(ds - dt)?, lw.huber_delta)?
        .sum_all()?
        .affine(1.0 / (b * (b - 1)) as f64, 0.0)?;
    let mut loss = dist_term.affine(lw.lambda_d, 0.0)?;

    if b < 3 {
        log::warn!("batch of 2: angle-wise relation term skipped");
        return Ok(loss);
    }
    if lw.lambda_a > 0.0 {
        let at = angle_potential(&teacher)?;
        let as_ = angle_potential(student_embeddings)?;
        let mask = at.mask.mul(&as_.mask)?;
        let count = ops::scalar(&mask.sum_all()?)?;
        if count > 0.0 {
            let angle_term = ops::huber(&(as_.values - at.values)?, lw.huber_delta)?
                .mul(&mask)?
                .sum_all()?
                .affine(lw.lambda_a / count, 0.0)?;
            loss = (loss + angle_term)?;
        }
    }
    Ok(loss)
}

/// Mean over instances of `||R_t - R_s||_F / (K·H·W)` on teacher-sized maps.
pub fn crkd_loss(teacher_features: &Tensor, adapted_student_features: &Tensor) -> Result<Tensor> {
    same_shape(teacher_features, adapted_student_features, "crkd_loss")?;
    let (b, k, h, w) = check_features(teacher_features)?;
    check_features(adapted_student_features)?;
    let rt = channel_relation_matrix(&teacher_features.detach())?.values;
    let rs = channel_relation_matrix(adapted_student_features)?.values;
    let frob = ops::safe_sqrt(&(rs - rt)?.sqr()?.sum((1, 2))?)?;
    let loss = frob.sum_all()?.affine(1.0 / (b * k * h * w) as f64, 0.0)?;
    Ok(loss.to_dtype(adapted_student_features.dtype())?)
}

/// Row-normalised cosine similarities with the diagonal dropped: `N×(N-1)`,
/// scaled by `1/τ`.
fn off_diagonal_similarities(ss: &SelfSupervisionBatch) -> Result<Tensor> {
    let (n, _) = ss.check()?;
    let p = &ss.projections;
    let sq = p.sqr()?.sum_keepdim(1)?;
    let nonzero = sq.gt(ops::SQRT_FLOOR)?.to_dtype(p.dtype())?;
    let unit = p.broadcast_mul(&ops::substitute_ones(&sq, &nonzero)?.sqrt()?.recip()?.mul(&nonzero)?)?;
    let sim = unit.matmul(&unit.t()?.contiguous()?)?;
    let idx: Vec<u32> = (0..n)
        .flat_map(|r| (0..n).filter(move |&c| c != r).map(|c| c as u32))
        .collect();
    let idx = Tensor::from_vec(idx, (n, n - 1), p.device())?;
    Ok(sim.gather(&idx, 1)?.affine(1.0 / ss.temperature, 0.0)?)
}

/// KL divergence between the teacher's and the student's softmax over
/// view-similarity rows, averaged over rows.
pub fn sskd_loss(teacher_ss: &SelfSupervisionBatch, student_ss: &SelfSupervisionBatch) -> Result<Tensor> {
    let (nt, _) = teacher_ss.check()?;
    let (n, _) = student_ss.check()?;
    if nt != n || teacher_ss.views != student_ss.views {
        return Err(Error::invalid("teacher and student self-supervision batches are not paired"));
    }
    if (teacher_ss.temperature - student_ss.temperature).abs() > 0.0 {
        return Err(Error::invalid("teacher and student must share the similarity temperature"));
    }
    let teacher = SelfSupervisionBatch {
        projections: teacher_ss.projections.detach().to_dtype(student_ss.projections.dtype())?,
        ..teacher_ss.clone()
    };
    let log_pt = ops::log_softmax(&off_diagonal_similarities(&teacher)?)?;
    let log_ps = ops::log_softmax(&off_diagonal_similarities(student_ss)?)?;
    let kl = log_pt.exp()?.mul(&(log_pt - log_ps)?)?.sum_all()?;
    Ok(kl.affine(1.0 / n as f64, 0.0)?)
}

/// Multi-positive contrastive objective: each row should single out the other
/// views of its own image among all off-diagonal rows.
pub fn contrastive_loss(ss: &SelfSupervisionBatch) -> Result<Tensor> {
    let (n, _) = ss.check()?;
    let v = ss.views;
    let log_p = ops::log_softmax(&off_diagonal_similarities(ss)?)?;
    // In the off-diagonal layout, column c of row r holds original column c' = c + (c >= r).
    let mut target = vec![0f64; n * (n - 1)];
    for r in 0..n {
        for c in 0..n - 1 {
            let orig = if c >= r { c + 1 } else { c };
            if orig / v == r / v {
                target[r * (n - 1) + c] = 1.0 / (v - 1) as f64;
            }
        }
    }
    let target = Tensor::from_vec(target, (n, n - 1), ss.projections.device())?.to_dtype(log_p.dtype())?;
    Ok(log_p.mul(&target)?.sum_all()?.affine(-1.0 / n as f64, 0.0)?)
}

/// Which objective terms a run combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Terms {
    /// Stand-alone weighted cross-entropy (used when BLKD is off).
    pub wce: bool,
    pub blkd: bool,
    pub drkd: bool,
    pub crkd: bool,
    pub sskd: bool,
}

impl Terms {
    pub const DKD: Terms = Terms { wce: false, blkd: true, drkd: true, crkd: true, sskd: false };
    pub const SSDKD: Terms = Terms { wce: false, blkd: true, drkd: true, crkd: true, sskd: true };

    pub fn needs_teacher(&self) -> bool {
        self.blkd || self.drkd || self.crkd || self.sskd
    }
}

/// Everything a composite objective may draw on. Optional members are only
/// required by the terms that use them.
pub struct LossInputs<'a> {
    pub teacher: Option<&'a ModelTaps>,
    pub student: &'a ModelTaps,
    pub adapted_student_features: Option<&'a Tensor>,
    pub labels: &'a [usize],
    pub weights: &'a ClassWeights,
    pub teacher_ss: Option<&'a SelfSupervisionBatch>,
    pub student_ss: Option<&'a SelfSupervisionBatch>,
}

/// A composite objective and the value of each of its pieces.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    /// Unweighted component values in evaluation order.
    pub components: Vec<(&'static str, f64)>,
}

impl LossBreakdown {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

pub fn composite_loss(inputs: &LossInputs<'_>, lw: &LossWeights, terms: Terms) -> Result<LossBreakdown> {
    let student = inputs.student;
    let dtype = student.logits.dtype();
    let mut total = Tensor::zeros((), dtype, student.logits.device())?;
    let mut components = Vec::new();
    let teacher = || {
        inputs
            .teacher
            .ok_or_else(|| Error::Config("objective needs teacher taps".into()))
    };

    if terms.wce {
        let wce = weighted_cross_entropy(&student.logits, inputs.labels, inputs.weights)?;
        components.push(("wce", ops::scalar(&wce)?));
        total = (total + wce)?;
    }
    if terms.blkd && lw.lambda_blkd > 0.0 {
        let t = teacher()?;
        let (wce, kd, blkd) = blkd_parts(&t.logits, &student.logits, inputs.labels, inputs.weights, lw)?;
        components.push(("wce", ops::scalar(&wce)?));
        components.push(("kd", ops::scalar(&kd)?));
        components.push(("blkd", ops::scalar(&blkd)?));
        total = (total + blkd.affine(lw.lambda_blkd, 0.0)?)?;
    }
    if terms.drkd && lw.lambda_drkd > 0.0 {
        let t = teacher()?;
        if student.embedding.dims()[0] < 2 {
            log::warn!("batch of 1: relational term skipped");
        } else {
            let drkd = drkd_loss(&t.embedding, &student.embedding, lw)?;
            components.push(("drkd", ops::scalar(&drkd)?));
            total = (total + drkd.affine(lw.lambda_drkd, 0.0)?)?;
        }
    }
    if terms.crkd && lw.lambda_crkd > 0.0 {
        let t = teacher()?;
        let adapted = inputs
            .adapted_student_features
            .ok_or_else(|| Error::Config("channel relation term needs adapted student features".into()))?;
        let crkd = crkd_loss(&t.features, adapted)?.to_dtype(dtype)?;
        components.push(("crkd", ops::scalar(&crkd)?));
        total = (total + crkd.affine(lw.lambda_crkd, 0.0)?)?;
    }
    if terms.sskd && lw.lambda_sskd > 0.0 {
        let (t, s) = inputs
            .teacher_ss
            .zip(inputs.student_ss)
            .ok_or_else(|| Error::Config("self-supervised term needs projections of augmented views".into()))?;
        let sskd = sskd_loss(t, s)?;
        components.push(("sskd", ops::scalar(&sskd)?));
        total = (total + sskd.affine(lw.lambda_sskd, 0.0)?)?;
    }
    if !matches!(total.dtype(), DType::F32 | DType::F64) {
        return Err(Error::invalid("losses are defined for floating-point taps only"));
    }
    components.push(("total", ops::scalar(&total)?));
    Ok(LossBreakdown { total, components })
}

/// `λ_blkd·BLKD + λ_drkd·DRKD + λ_crkd·CRKD`
pub fn dkd_loss(inputs: &LossInputs<'_>, lw: &LossWeights) -> Result<Tensor> {
    Ok(composite_loss(inputs, lw, Terms::DKD)?.total)
}

/// D-KD plus `λ_sskd·SSKD`.
pub fn ssdkd_loss(inputs: &LossInputs<'_>, lw: &LossWeights) -> Result<Tensor> {
    Ok(composite_loss(inputs, lw, Terms::SSDKD)?.total)
}
