//! Knowledge representations extracted from raw model outputs: temperature
//! softened probabilities, inter-instance distance/angle potentials over a
//! batch of embeddings, and intra-instance channel Gram matrices.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;

/// Squared distances at or below this mark two embeddings as coincident.
pub const COINCIDENT_EPS: f64 = 1e-12;

/// Temperature-softened class probabilities, `B×C`.
#[derive(Debug, Clone)]
pub struct ProbBatch {
    pub values: Tensor,
    pub temperature: f64,
}

pub fn softened_probabilities(logits: &Tensor, temperature: f64) -> Result<ProbBatch> {
    check_logits(logits)?;
    check_temperature(temperature)?;
    let values = ops::softmax(&logits.affine(1.0 / temperature, 0.0)?)?;
    Ok(ProbBatch { values, temperature })
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

pub(crate) fn check_logits(logits: &Tensor) -> Result<(usize, usize)> {
    let (b, c) = logits
        .dims2()
        .map_err(|_| Error::invalid(format!("logits must be B×C, got {:?}", logits.dims())))?;
    if b < 1 || c < 2 {
        return Err(Error::invalid(format!("logits need B >= 1 and C >= 2, got {b}×{c}")));
    }
    ops::ensure_finite(logits, "logits")?;
    Ok((b, c))
}

pub(crate) fn check_embeddings(emb: &Tensor) -> Result<(usize, usize)> {
    let (b, d) = emb
        .dims2()
        .map_err(|_| Error::invalid(format!("embeddings must be B×D, got {:?}", emb.dims())))?;
    if d < 1 {
        return Err(Error::invalid("embedding width must be at least 1"));
    }
    ops::ensure_finite(emb, "embeddings")?;
    Ok((b, d))
}

pub(crate) fn check_features(f: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let dims = f
        .dims4()
        .map_err(|_| Error::invalid(format!("feature maps must be B×K×H×W, got {:?}", f.dims())))?;
    if dims.1 < 1 || dims.2 < 1 || dims.3 < 1 {
        return Err(Error::invalid(format!("empty feature maps {dims:?}")));
    }
    ops::ensure_finite(f, "feature maps")?;
    Ok(dims)
}

/// `B×B×D` tensor whose `[j, i, :]` slice is `e_i - e_j`.
fn difference_vectors(emb: &Tensor) -> Result<Tensor> {
    Ok(emb.unsqueeze(0)?.broadcast_sub(&emb.unsqueeze(1)?)?)
}

/// Pairwise distances divided by their batch mean.
#[derive(Debug, Clone)]
pub struct DistancePotential {
    /// `B×B`, symmetric with zero diagonal.
    pub values: Tensor,
    /// Set when every embedding coincides and the mean distance is zero.
    pub degenerate: bool,
}

pub fn distance_potential(emb: &Tensor) -> Result<DistancePotential> {
    let (b, _) = check_embeddings(emb)?;
    if b < 2 {
        return Err(Error::invalid(format!("distance potential needs B >= 2, got {b}")));
    }
    let sq = difference_vectors(emb)?.sqr()?.sum(2)?;
    let dist = ops::safe_sqrt(&sq)?;
    let mean = (dist.sum_all()? / (b * (b - 1)) as f64)?;
    if ops::scalar(&mean)? <= 0.0 {
        return Ok(DistancePotential {
            values: dist.zeros_like()?,
            degenerate: true,
        });
    }
    Ok(DistancePotential {
        values: dist.broadcast_div(&mean)?,
        degenerate: false,
    })
}

/// Cosines of the angle at the middle vertex of every ordered triple.
#[derive(Debug, Clone)]
pub struct AnglePotential {
    /// `B×B×B`, `[i, j, k]` is the cosine at `e_j` between `e_i - e_j` and `e_k - e_j`.
    pub values: Tensor,
    /// `B×B×B` 0/1 mask of triples with distinct indices and no coincident pair
    /// at the vertex. Masked entries of `values` are 0.
    pub mask: Tensor,
    /// Set when some distinct-index triple had to be masked.
    pub degenerate: bool,
}

pub fn angle_potential(emb: &Tensor) -> Result<AnglePotential> {
    let (b, _) = check_embeddings(emb)?;
    if b < 3 {
        return Err(Error::invalid(format!("angle potential needs B >= 3, got {b}")));
    }
    let diff = difference_vectors(emb)?;
    let sq = diff.sqr()?.sum_keepdim(2)?;
    let separated = sq.gt(COINCIDENT_EPS)?.to_dtype(emb.dtype())?;
    let inv_norm = ops::substitute_ones(&sq, &separated)?.sqrt()?.recip()?.mul(&separated)?;
    let unit = diff.broadcast_mul(&inv_norm)?;
    // [j, i, k] = <unit(e_i - e_j), unit(e_k - e_j)>
    let cos = unit.matmul(&unit.transpose(1, 2)?.contiguous()?)?;
    let cos = cos.transpose(0, 1)?.contiguous()?;

    let sep: Vec<Vec<f64>> = separated.squeeze(2)?.to_dtype(DType::F64)?.to_vec2()?;
    let mut mask = vec![0f64; b * b * b];
    let mut degenerate = false;
    for i in 0..b {
        for j in 0..b {
            for k in 0..b {
                if i == j || j == k || i == k {
                    continue;
                }
                if sep[j][i] > 0.0 && sep[j][k] > 0.0 {
                    mask[(i * b + j) * b + k] = 1.0;
                } else {
                    degenerate = true;
                }
            }
        }
    }
    let mask = Tensor::from_vec(mask, (b, b, b), emb.device())?.to_dtype(emb.dtype())?;
    Ok(AnglePotential {
        values: cos.mul(&mask)?,
        mask,
        degenerate,
    })
}

/// Batched `K×K` channel relation matrices.
#[derive(Debug, Clone)]
pub struct RelationalMatrix {
    /// `B×K×K`. Computed in 64-bit regardless of the input precision.
    pub values: Tensor,
}

/// Gram matrix of the vectorised channel maps of each instance:
/// `R[k, k'] = <vec(f_k), vec(f_k')>`.
pub fn channel_relation_matrix(features: &Tensor) -> Result<RelationalMatrix> {
    let (b, k, h, w) = check_features(features)?;
    let flat = features.to_dtype(DType::F64)?.reshape((b, k, h * w))?;
    let values = flat.matmul(&flat.transpose(1, 2)?.contiguous()?)?;
    Ok(RelationalMatrix { values })
}

/// Trainable 1×1 convolution mapping student channels onto the teacher's.
#[derive(Debug, Clone)]
pub struct ChannelAdapter {
    /// `K_teacher × K_student`
    pub weight: Var,
    /// `K_teacher`
    pub bias: Option<Var>,
}

impl ChannelAdapter {
    /// Gaussian weights with variance `1/K_student` and zero bias.
    pub fn new<R: Rng>(
        student_channels: usize,
        teacher_channels: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if student_channels == 0 || teacher_channels == 0 {
            return Err(Error::invalid("adapter channel counts must be positive"));
        }
        let normal = Normal::new(0.0, (1.0 / student_channels as f64).sqrt())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let data: Vec<f32> = (0..teacher_channels * student_channels)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        let weight = Tensor::from_vec(data, (teacher_channels, student_channels), device)?.to_dtype(dtype)?;
        let bias = Tensor::zeros(teacher_channels, dtype, device)?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Some(Var::from_tensor(&bias)?),
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (kt, _) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.dims() != [kt] {
                return Err(Error::invalid(format!(
                    "adapter bias must have {kt} entries, got {:?}",
                    b.dims()
                )));
            }
        }
        ops::ensure_finite(&weight, "adapter weight")?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: bias.map(|b| Var::from_tensor(&b)).transpose()?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Resize student maps to `target` (bilinearly, when sizes differ) and project
/// them to the teacher's channel count.
pub fn adapt_channels(
    student_features: &Tensor,
    adapter: &ChannelAdapter,
    target: (usize, usize),
) -> Result<Tensor> {
    let (b, k, _, _) = check_features(student_features)?;
    if adapter.in_channels() != k {
        return Err(Error::invalid(format!(
            "adapter expects {} input channels, features have {k}",
            adapter.in_channels()
        )));
    }
    let (th, tw) = target;
    let resized = ops::resize_bilinear(student_features, th, tw)?;
    let flat = resized.reshape((b, k, th * tw))?;
    let w = adapter.weight.as_tensor().to_dtype(flat.dtype())?;
    let mut out = w.broadcast_left(b)?.contiguous()?.matmul(&flat.contiguous()?)?;
    if let Some(bias) = &adapter.bias {
        let bias = bias.as_tensor().to_dtype(flat.dtype())?.reshape((1, adapter.out_channels(), 1))?;
        out = out.broadcast_add(&bias)?;
    }
    Ok(out.reshape((b, adapter.out_channels(), th, tw))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), c), &Device::Cpu).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = softened_probabilities(&t2(&[&[0.0, 0.0, 0.0]]), 1.0).unwrap();
        for v in p.values.to_vec2::<f64>().unwrap()[0].iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softened_probabilities_at_t2() {
        // exp(0.5)/(exp(0.5)+exp(1)) and its complement, evaluated with mpmath at 50 digits.
        let p = softened_probabilities(&t2(&[&[1.0, 2.0]]), 2.0).unwrap();
        let v = p.values.to_vec2::<f64>().unwrap();
        assert!((v[0][0] - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!((v[0][1] - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn bad_temperature_and_non_finite_logits_rejected() {
        let l = t2(&[&[1.0, 2.0]]);
        assert!(matches!(softened_probabilities(&l, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softened_probabilities(&l, -1.0), Err(Error::InvalidArgument(_))));
        let bad = t2(&[&[f64::NAN, 2.0]]);
        assert!(matches!(softened_probabilities(&bad, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identical_embeddings_have_zero_distance() {
        let e = t2(&[&[1.0, 2.0], &[1.0, 2.0], &[0.0, 1.0]]);
        let d = distance_potential(&e).unwrap().values.to_vec2::<f64>().unwrap();
        assert_eq!(d[0][1], 0.0);
        assert!(d[0][2] > 0.0);
    }

    #[test]
    fn all_coincident_embeddings_are_degenerate() {
        let e = t2(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let d = distance_potential(&e).unwrap();
        assert!(d.degenerate);
        assert!(d.values.to_vec2::<f64>().unwrap().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_size_preconditions() {
        let one = t2(&[&[1.0, 2.0]]);
        assert!(distance_potential(&one).is_err());
        let two = t2(&[&[1.0, 2.0], &[0.0, 0.0]]);
        assert!(angle_potential(&two).is_err());
    }

    #[test]
    fn straight_and_right_angles() {
        let line = t2(&[&[0.0, 0.0], &[1.0, 0.0], &[3.0, 0.0]]);
        let a = angle_potential(&line).unwrap().values.to_vec3::<f64>().unwrap();
        assert!((a[0][1][2] + 1.0).abs() < 1e-12);
        let corner = t2(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 2.0]]);
        let a = angle_potential(&corner).unwrap().values.to_vec3::<f64>().unwrap();
        assert!(a[0][1][2].abs() < 1e-12);
    }

    #[test]
    fn coincident_vertex_masks_triple() {
        let e = t2(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        let a = angle_potential(&e).unwrap();
        assert!(a.degenerate);
        let v = a.values.to_vec3::<f64>().unwrap();
        let m = a.mask.to_vec3::<f64>().unwrap();
        assert_eq!(v[0][1][2], 0.0);
        assert_eq!(m[0][1][2], 0.0);
        // vertex 2 sees two distinct (coincident with each other) points: cosine 1
        assert_eq!(m[0][2][1], 1.0);
        assert!((v[0][2][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_and_zero_gram() {
        let g = [1.0, -2.0, 0.5, 3.0];
        let data: Vec<f64> = (0..3).flat_map(|_| g).collect();
        let f = Tensor::from_vec(data, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let r = channel_relation_matrix(&f).unwrap().values.to_vec3::<f64>().unwrap();
        let norm_sq: f64 = g.iter().map(|x| x * x).sum();
        assert!(r[0].iter().flatten().all(|v| (v - norm_sq).abs() < 1e-12));

        let z = Tensor::zeros((2, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let r = channel_relation_matrix(&z).unwrap().values.to_vec3::<f64>().unwrap();
        assert!(r.iter().flatten().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_and_zero_adapter() {
        let dev = Device::Cpu;
        let f = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &dev).unwrap();
        let eye = Tensor::eye(3, DType::F64, &dev).unwrap();
        let ad = ChannelAdapter::from_tensors(eye, Some(Tensor::zeros(3, DType::F64, &dev).unwrap())).unwrap();
        let out = adapt_channels(&f, &ad, (4, 4)).unwrap();
        let diff = (out - &f).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);

        let zero = ChannelAdapter::from_tensors(Tensor::zeros((5, 3), DType::F64, &dev).unwrap(), None).unwrap();
        let out = adapt_channels(&f, &zero, (2, 2)).unwrap();
        assert_eq!(out.dims(), &[2, 5, 2, 2]);
        assert_eq!(out.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn adapter_channel_mismatch() {
        let dev = Device::Cpu;
        let f = Tensor::zeros((1, 4, 2, 2), DType::F64, &dev).unwrap();
        let ad = ChannelAdapter::from_tensors(Tensor::zeros((6, 3), DType::F64, &dev).unwrap(), None).unwrap();
        assert!(matches!(adapt_channels(&f, &ad, (2, 2)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (i, o) in [(4, 2), (2, 4), (5, 3), (1, 3), (3, 3)] {
            let m = ops::interpolation_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // equal sizes is the identity
        let m = ops::interpolation_matrix(3, 3);
        assert_eq!(m, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
