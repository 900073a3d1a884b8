//! Convolutional bodies: the small plain CNNs used for tests and smoke runs,
//! and the ResNet-50 / MobileNetV2 layouts (parameter names follow the
//! torchvision state-dict convention so converted weights load directly).

use candle_core::Tensor;

use super::layers::{Activation, Builder, ConvBnAct, ConvSpec, Mode};
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) enum Body {
    Plain(Vec<ConvBnAct>),
    ResNet(ResNet),
    MobileNetV2(MobileNetV2),
}

impl Body {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Body::Plain(blocks) => {
                let mut h = x.clone();
                for b in blocks {
                    h = b.forward(&h, mode)?;
                }
                Ok(h)
            }
            Body::ResNet(r) => r.forward(x, mode),
            Body::MobileNetV2(m) => m.forward(x, mode),
        }
    }

    /// Output of every plain block in order (empty for the large bodies).
    pub fn block_outputs(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let mut outs = Vec::new();
        if let Body::Plain(blocks) = self {
            let mut h = x.clone();
            for b in blocks {
                h = b.forward(&h, mode)?;
                outs.push(h.clone());
            }
        }
        Ok(outs)
    }
}

/// `(out_channels, stride)` per block; every block is a 3×3 conv-BN-ReLU.
pub(crate) fn build_plain(b: &mut Builder<'_>, in_channels: usize, layout: &[(usize, usize)]) -> Result<Body> {
    let mut blocks = Vec::with_capacity(layout.len());
    let mut c_in = in_channels;
    for (i, &(c_out, stride)) in layout.iter().enumerate() {
        blocks.push(ConvBnAct::build(
            b,
            &format!("blocks.{i}.conv"),
            &format!("blocks.{i}.bn"),
            ConvSpec::new(c_in, c_out, 3, stride),
            Activation::Relu,
        )?);
        c_in = c_out;
    }
    Ok(Body::Plain(blocks))
}

#[derive(Debug, Clone)]
pub(crate) struct Bottleneck {
    reduce: ConvBnAct,
    spatial: ConvBnAct,
    expand: ConvBnAct,
    downsample: Option<ConvBnAct>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.reduce.forward(x, mode)?;
        let h = self.spatial.forward(&h, mode)?;
        let h = self.expand.forward(&h, mode)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResNet {
    stem: ConvBnAct,
    blocks: Vec<Bottleneck>,
}

impl ResNet {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.stem.forward(x, mode)?;
        // Post-ReLU activations are non-negative, so zero padding acts like -inf padding.
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut h = h.max_pool2d_with_stride(3, 2)?;
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }
}

pub(crate) const RESNET50_CHANNELS: usize = 2048;

pub(crate) fn build_resnet50(b: &mut Builder<'_>, in_channels: usize) -> Result<Body> {
    let stem = ConvBnAct::build(b, "conv1", "bn1", ConvSpec::new(in_channels, 64, 7, 2), Activation::Relu)?;
    let mut blocks = Vec::new();
    let mut c_in = 64;
    for (layer, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for i in 0..depth {
            let stride = if i == 0 && layer > 0 { 2 } else { 1 };
            let p = format!("layer{}.{i}", layer + 1);
            let c_out = width * 4;
            let reduce = ConvBnAct::build(b, &format!("{p}.conv1"), &format!("{p}.bn1"), ConvSpec::new(c_in, width, 1, 1), Activation::Relu)?;
            let spatial = ConvBnAct::build(b, &format!("{p}.conv2"), &format!("{p}.bn2"), ConvSpec::new(width, width, 3, stride), Activation::Relu)?;
            let expand = ConvBnAct::build(b, &format!("{p}.conv3"), &format!("{p}.bn3"), ConvSpec::new(width, c_out, 1, 1), Activation::Identity)?;
            let downsample = if i == 0 {
                Some(ConvBnAct::build(
                    b,
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    ConvSpec::new(c_in, c_out, 1, stride),
                    Activation::Identity,
                )?)
            } else {
                None
            };
            blocks.push(Bottleneck { reduce, spatial, expand, downsample });
            c_in = c_out;
        }
    }
    Ok(Body::ResNet(ResNet { stem, blocks }))
}

#[derive(Debug, Clone)]
pub(crate) struct InvertedResidual {
    layers: Vec<ConvBnAct>,
    residual: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct MobileNetV2 {
    stem: ConvBnAct,
    blocks: Vec<InvertedResidual>,
    last: ConvBnAct,
}

impl MobileNetV2 {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = self.stem.forward(x, mode)?;
        for block in &self.blocks {
            let mut y = h.clone();
            for l in &block.layers {
                y = l.forward(&y, mode)?;
            }
            h = if block.residual { (y + h)? } else { y };
        }
        self.last.forward(&h, mode)
    }
}

pub(crate) const MOBILENETV2_CHANNELS: usize = 1280;

pub(crate) fn build_mobilenet_v2(b: &mut Builder<'_>, in_channels: usize) -> Result<Body> {
    // (expansion, output channels, repeats, first stride)
    const SETTINGS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let stem = ConvBnAct::build(b, "features.0.0", "features.0.1", ConvSpec::new(in_channels, 32, 3, 2), Activation::Relu6)?;
    let mut blocks = Vec::new();
    let mut c_in = 32;
    let mut idx = 1;
    for (t, c, n, s) in SETTINGS {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let hidden = c_in * t;
            let p = format!("features.{idx}.conv");
            let mut layers = Vec::new();
            let mut slot = 0;
            if t != 1 {
                layers.push(ConvBnAct::build(b, &format!("{p}.0.0"), &format!("{p}.0.1"), ConvSpec::new(c_in, hidden, 1, 1), Activation::Relu6)?);
                slot = 1;
            }
            layers.push(ConvBnAct::build(
                b,
                &format!("{p}.{slot}.0"),
                &format!("{p}.{slot}.1"),
                ConvSpec::depthwise(hidden, stride),
                Activation::Relu6,
            )?);
            layers.push(ConvBnAct::build(
                b,
                &format!("{p}.{}", slot + 1),
                &format!("{p}.{}", slot + 2),
                ConvSpec::new(hidden, c, 1, 1),
                Activation::Identity,
            )?);
            blocks.push(InvertedResidual { layers, residual: stride == 1 && c_in == c });
            c_in = c;
            idx += 1;
        }
    }
    let last = ConvBnAct::build(
        b,
        &format!("features.{idx}.0"),
        &format!("features.{idx}.1"),
        ConvSpec::new(c_in, MOBILENETV2_CHANNELS, 1, 1),
        Activation::Relu6,
    )?;
    Ok(Body::MobileNetV2(MobileNetV2 { stem, blocks, last }))
}
