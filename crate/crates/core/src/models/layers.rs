use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as normalization running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Ordered, named parameter set of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, var: Var, kind: ParamKind) {
        self.entries.push(NamedParam { name, var, kind });
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter().filter(|p| p.kind == ParamKind::Trainable)
    }

    pub fn get(&self, name: &str) -> Option<&NamedParam> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|p| p.var.elem_count()).sum()
    }
}

/// Where freshly built layers take their values from.
pub(crate) enum Source<'a> {
    Init(&'a mut ChaCha8Rng),
    /// Every parameter must be present.
    Values(&'a BTreeMap<String, Tensor>),
    /// Take what is present, initialise the rest.
    Partial(&'a BTreeMap<String, Tensor>, &'a mut ChaCha8Rng),
}

pub(crate) enum Init {
    Normal(f64),
    Uniform(f64),
    Const(f64),
}

pub(crate) struct Builder<'a> {
    pub source: Source<'a>,
    pub store: ParamStore,
    pub dtype: DType,
    pub device: Device,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        let fresh = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| d.sample(rng) as f32).collect()
                }
                Init::Uniform(bound) => {
                    let d = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| rng.sample(d) as f32).collect()
                }
                Init::Const(c) => vec![c as f32; n],
            };
            Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
        };
        let stored = |map: &BTreeMap<String, Tensor>| -> Result<Option<Tensor>> {
            match map.get(name) {
                None => Ok(None),
                Some(t) if t.dims() == shape => Ok(Some(t.clone())),
                Some(t) => Err(Error::invalid(format!(
                    "parameter {name}: expected shape {shape:?}, found {:?}",
                    t.dims()
                ))),
            }
        };
        let tensor = match &mut self.source {
            Source::Init(rng) => fresh(rng)?,
            Source::Values(map) => {
                stored(map)?.ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?
            }
            Source::Partial(map, rng) => match stored(map)? {
                Some(t) => t,
                None => fresh(rng)?,
            },
        };
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        self.store.push(name.to_string(), var.clone(), kind);
        Ok(var)
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Conv2d> {
        let fan_out = spec.out_channels * spec.kernel * spec.kernel / spec.groups;
        let weight = self.param(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel],
            Init::Normal((2.0 / fan_out as f64).sqrt()),
            ParamKind::Trainable,
        )?;
        Ok(Conv2d { weight, spec })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.param(&format!("{name}.weight"), &[channels], Init::Const(1.0), ParamKind::Trainable)?,
            beta: self.param(&format!("{name}.bias"), &[channels], Init::Const(0.0), ParamKind::Trainable)?,
            running_mean: self.param(&format!("{name}.running_mean"), &[channels], Init::Const(0.0), ParamKind::Buffer)?,
            running_var: self.param(&format!("{name}.running_var"), &[channels], Init::Const(1.0), ParamKind::Buffer)?,
        })
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Linear {
            weight: self.param(&format!("{name}.weight"), &[output, input], Init::Uniform(bound), ParamKind::Trainable)?,
            bias: self.param(&format!("{name}.bias"), &[output], Init::Uniform(bound), ParamKind::Trainable)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, stride: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, 3, stride)
        }
    }
}

/// Bias-free convolution (always followed by normalization).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), self.spec.padding, self.spec.stride, 1, self.spec.groups)?)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = match mode {
            Mode::Train => {
                let n = b * h * w;
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let m = BN_MOMENTUM;
                let batch_mean = mean.detach().flatten_all()?;
                let unbiased = if n > 1 {
                    (var.detach().flatten_all()? * (n as f64 / (n - 1) as f64))?
                } else {
                    var.detach().flatten_all()?
                };
                let rm = (self.running_mean.as_tensor().affine(1.0 - m, 0.0)? + batch_mean.affine(m, 0.0)?)?;
                let rv = (self.running_var.as_tensor().affine(1.0 - m, 0.0)? + unbiased.affine(m, 0.0)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            ),
        };
        let inv_std = (var + BN_EPS)?.sqrt()?.recip()?;
        let normed = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `out × in`
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Relu,
    Relu6,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Relu6 => x.relu()?.minimum(6.0)?,
            Activation::Identity => x.clone(),
        })
    }
}

/// Convolution, batch normalization, activation.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Activation,
}

impl ConvBnAct {
    pub(crate) fn build(b: &mut Builder<'_>, conv_name: &str, bn_name: &str, spec: ConvSpec, act: Activation) -> Result<Self> {
        Ok(Self {
            conv: b.conv(conv_name, spec)?,
            bn: b.batch_norm(bn_name, spec.out_channels)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.act.apply(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }
}
