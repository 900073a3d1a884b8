//! Backbones with tap points for feature maps, pooled embeddings and logits,
//! plus the contrastive projection head and the channel adapter hook.

mod arch;
pub mod layers;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use self::arch::Body;
pub use self::layers::{Mode, NamedParam, ParamKind, ParamStore};
use self::layers::{Builder, Linear, Source};
use crate::error::{Error, Result};
use crate::relations::{adapt_channels, ChannelAdapter};
use crate::seeding::rng_for;

pub const DEFAULT_PROJECTION_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub input_size: InputSize,
    pub class_count: usize,
    pub embedding_width: usize,
    pub last_conv_channels: usize,
    /// Path to a `.safetensors` file with pretrained weights.
    #[serde(default)]
    pub pretrained_source: Option<String>,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
}

fn default_projection_dim() -> usize {
    DEFAULT_PROJECTION_DIM
}

const TINY_TEACHER: &[(usize, usize)] = &[(16, 1), (32, 2), (16, 2)];
const TINY_STUDENT: &[(usize, usize)] = &[(16, 2), (16, 2)];

pub const REGISTERED: &[&str] = &["tiny-teacher", "tiny-student", "resnet50", "mobilenetv2"];

impl BackboneSpec {
    /// Registry defaults for `name` with `class_count` outputs.
    pub fn registered(name: &str, class_count: usize) -> Result<Self> {
        let (input, k, pretrained) = match name {
            "tiny-teacher" => (16, TINY_TEACHER.last().unwrap().0, None),
            "tiny-student" => (16, TINY_STUDENT.last().unwrap().0, None),
            "resnet50" => (224, arch::RESNET50_CHANNELS, Some("imagenet")),
            "mobilenetv2" => (224, arch::MOBILENETV2_CHANNELS, Some("imagenet")),
            other => {
                return Err(Error::NotFound(format!(
                    "backbone `{other}` is not registered (known: {})",
                    REGISTERED.join(", ")
                )))
            }
        };
        let spec = Self {
            name: name.to_string(),
            input_size: InputSize { height: input, width: input, channels: 3 },
            class_count,
            embedding_width: k,
            last_conv_channels: k,
            pretrained_source: pretrained.map(str::to_string),
            projection_dim: DEFAULT_PROJECTION_DIM,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_size.height = height;
        self.input_size.width = width;
        self
    }

    pub fn without_pretrained(mut self) -> Self {
        self.pretrained_source = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !REGISTERED.contains(&self.name.as_str()) {
            return Err(Error::NotFound(format!("backbone `{}` is not registered", self.name)));
        }
        let i = self.input_size;
        if i.height == 0 || i.width == 0 || i.channels == 0 {
            return Err(Error::invalid(format!("input size must be positive, got {i:?}")));
        }
        if self.class_count < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.class_count)));
        }
        if self.last_conv_channels == 0 || self.projection_dim == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.embedding_width != self.last_conv_channels {
            return Err(Error::invalid("embeddings are average-pooled features: embedding_width must equal last_conv_channels"));
        }
        let expected = match self.name.as_str() {
            "tiny-teacher" => TINY_TEACHER.last().unwrap().0,
            "tiny-student" => TINY_STUDENT.last().unwrap().0,
            "resnet50" => arch::RESNET50_CHANNELS,
            _ => arch::MOBILENETV2_CHANNELS,
        };
        if self.last_conv_channels != expected {
            return Err(Error::invalid(format!(
                "{} has {expected} output channels, spec says {}",
                self.name, self.last_conv_channels
            )));
        }
        Ok(())
    }

    /// Spatial size of the last feature maps for this input size.
    pub fn feature_size(&self) -> (usize, usize) {
        let conv = |x: usize, k: usize, s: usize| (x + 2 * (k / 2) - k) / s + 1;
        let plain = |x: usize, layout: &[(usize, usize)]| layout.iter().fold(x, |x, &(_, s)| conv(x, 3, s));
        let large = |x: usize, resnet: bool| {
            if resnet {
                // 7×7/2 stem, 3×3/2 pool, then three stride-2 stages
                let x = conv(x, 7, 2);
                let x = (x + 2 - 3) / 2 + 1;
                (0..3).fold(x, |x, _| conv(x, 3, 2))
            } else {
                (0..5).fold(x, |x, _| conv(x, 3, 2))
            }
        };
        let f = |x: usize| match self.name.as_str() {
            "tiny-teacher" => plain(x, TINY_TEACHER),
            "tiny-student" => plain(x, TINY_STUDENT),
            "resnet50" => large(x, true),
            _ => large(x, false),
        };
        (f(self.input_size.height), f(self.input_size.width))
    }
}

/// The three knowledge carriers of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelTaps {
    /// `B×K×H_f×W_f`, last convolutional block output.
    pub features: Tensor,
    /// `B×D`, global average of `features`.
    pub embedding: Tensor,
    /// `B×C`
    pub logits: Tensor,
}

impl ModelTaps {
    pub fn detach(&self) -> Self {
        Self {
            features: self.features.detach(),
            embedding: self.embedding.detach(),
            logits: self.logits.detach(),
        }
    }
}

#[derive(Debug, Clone)]
struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: BackboneSpec,
    body: Body,
    fc: Linear,
    projection: ProjectionHead,
    adapter: Option<ChannelAdapter>,
    store: ParamStore,
    dtype: DType,
}

fn classifier_name(spec: &BackboneSpec) -> &'static str {
    if spec.name == "mobilenetv2" {
        "classifier.1"
    } else {
        "fc"
    }
}

const ADAPTER_WEIGHT: &str = "adapter.weight";
const ADAPTER_BIAS: &str = "adapter.bias";

/// Deterministically initialised model; pretrained weights are loaded when
/// the spec names a source, and their absence is an error.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = rng_for(seed, "init", &[]);
    match &spec.pretrained_source {
        None => Model::assemble(spec, Source::Init(&mut rng), DType::F32),
        Some(src) => {
            let mut weights = load_pretrained(spec, src)?;
            let head = classifier_name(spec);
            weights.retain(|k, _| !k.starts_with(&format!("{head}.")) && !k.starts_with("proj.") && !k.starts_with("adapter."));
            Model::assemble(spec, Source::Partial(&weights, &mut rng), DType::F32)
        }
    }
}

fn load_pretrained(spec: &BackboneSpec, src: &str) -> Result<BTreeMap<String, Tensor>> {
    let path = Path::new(src);
    if !path.is_file() {
        return Err(Error::Unavailable(format!(
            "pretrained weights `{src}` for {} are not available locally; pass a .safetensors path or disable pretraining",
            spec.name
        )));
    }
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    Ok(tensors
        .into_iter()
        .map(|(k, v)| v.to_dtype(DType::F32).map(|v| (k, v)))
        .collect::<candle_core::Result<_>>()?)
}

impl Model {
    fn assemble(spec: &BackboneSpec, source: Source<'_>, dtype: DType) -> Result<Self> {
        let mut b = Builder {
            source,
            store: ParamStore::default(),
            dtype,
            device: Device::Cpu,
        };
        let c = spec.input_size.channels;
        let body = match spec.name.as_str() {
            "tiny-teacher" => arch::build_plain(&mut b, c, TINY_TEACHER)?,
            "tiny-student" => arch::build_plain(&mut b, c, TINY_STUDENT)?,
            "resnet50" => arch::build_resnet50(&mut b, c)?,
            "mobilenetv2" => arch::build_mobilenet_v2(&mut b, c)?,
            other => return Err(Error::NotFound(format!("backbone `{other}` is not registered"))),
        };
        let fc = b.linear(classifier_name(spec), spec.embedding_width, spec.class_count)?;
        let hidden = b.linear("proj.0", spec.embedding_width, 2 * spec.projection_dim)?;
        let out = b.linear("proj.2", 2 * spec.projection_dim, spec.projection_dim)?;
        Ok(Self {
            spec: spec.clone(),
            body,
            fc,
            projection: ProjectionHead { hidden, out },
            adapter: None,
            store: b.store,
            dtype,
        })
    }

    /// Rebuild from a complete named-parameter map (a loaded checkpoint).
    pub fn from_parameters(spec: &BackboneSpec, values: &BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let dtype = values.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let mut model = Self::assemble(spec, Source::Values(values), dtype)?;
        if let Some(w) = values.get(ADAPTER_WEIGHT) {
            let bias = values.get(ADAPTER_BIAS).cloned();
            model.set_adapter(ChannelAdapter::from_tensors(w.to_dtype(dtype)?, bias.map(|b| b.to_dtype(dtype)).transpose()?)?);
        }
        let known: std::collections::BTreeSet<&str> = model.store.iter().map(|p| p.name.as_str()).collect();
        if let Some(extra) = values.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::invalid(format!("unexpected parameter {extra} for {}", spec.name)));
        }
        Ok(model)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn parameters(&self) -> &ParamStore {
        &self.store
    }

    /// Copy of every parameter and buffer, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Independent copy in another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let values = self
            .store
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.as_tensor().to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_parameters(&self.spec, &values)
    }

    /// Overwrite parameter values in place from `values` (names must match).
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in self.store.iter() {
            let v = values
                .get(&p.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", p.name)))?;
            if v.dims() != p.var.dims() {
                return Err(Error::invalid(format!("shape mismatch for {}", p.name)));
            }
            p.var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn set_adapter(&mut self, adapter: ChannelAdapter) {
        self.store.push(ADAPTER_WEIGHT.into(), adapter.weight.clone(), ParamKind::Trainable);
        if let Some(b) = &adapter.bias {
            self.store.push(ADAPTER_BIAS.into(), b.clone(), ParamKind::Trainable);
        }
        self.adapter = Some(adapter);
    }

    /// Attach a channel adapter towards `teacher_channels`; its parameters join
    /// this model's parameter set. No-op when one is already attached.
    pub fn attach_adapter(&mut self, teacher_channels: usize, seed: u64) -> Result<()> {
        if let Some(a) = &self.adapter {
            if a.out_channels() != teacher_channels {
                return Err(Error::Config(format!(
                    "attached adapter targets {} channels, teacher has {teacher_channels}",
                    a.out_channels()
                )));
            }
            return Ok(());
        }
        let mut rng = rng_for(seed, "adapter", &[]);
        let adapter = ChannelAdapter::new(self.spec.last_conv_channels, teacher_channels, &mut rng, self.dtype, &Device::Cpu)?;
        self.set_adapter(adapter);
        Ok(())
    }

    pub fn adapter(&self) -> Option<&ChannelAdapter> {
        self.adapter.as_ref()
    }

    pub fn adapt(&self, features: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        let adapter = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::Config("no channel adapter attached".into()))?;
        adapt_channels(features, adapter, target)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let i = self.spec.input_size;
        match images.dims() {
            [b, c, h, w] if *b >= 1 && (*c, *h, *w) == (i.channels, i.height, i.width) => Ok(()),
            other => Err(Error::invalid(format!(
                "{} expects B×{}×{}×{} images, got {other:?}",
                self.spec.name, i.channels, i.height, i.width
            ))),
        }
    }

    /// Feature maps, embedding and logits from a single pass.
    pub fn forward_with_taps(&self, images: &Tensor, mode: Mode) -> Result<ModelTaps> {
        self.check_images(images)?;
        let features = self.body.forward(&images.to_dtype(self.dtype)?, mode)?;
        let (embedding, logits) = self.head(&features)?;
        Ok(ModelTaps { features, embedding, logits })
    }

    /// Global average pooling and the classifier, applied to given feature maps.
    pub fn head(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let embedding = features.mean((2, 3))?;
        let logits = self.fc.forward(&embedding)?;
        Ok((embedding, logits))
    }

    pub fn block_outputs(&self, images: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        self.check_images(images)?;
        self.body.block_outputs(&images.to_dtype(self.dtype)?, mode)
    }

    pub fn projection_head_forward(&self, embedding: &Tensor) -> Result<Tensor> {
        let width = self.projection.hidden.in_features();
        match embedding.dims() {
            [_, d] if *d == width => {}
            other => {
                return Err(Error::invalid(format!("projection head expects B×{width}, got {other:?}")))
            }
        }
        let h = self.projection.hidden.forward(embedding)?.relu()?;
        self.projection.out.forward(&h)
    }

    pub fn classifier(&self) -> (&Tensor, &Tensor) {
        (self.fc.weight.as_tensor(), self.fc.bias.as_tensor())
    }
}
