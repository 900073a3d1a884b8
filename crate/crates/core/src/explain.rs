//! Gradient-weighted class activation maps over the last convolutional
//! feature maps.

use std::path::Path;

use candle_core::{DType, IndexOp, Tensor, Var};

use crate::data::{stack, Image};
use crate::error::{Error, Result};
use crate::models::{InputSize, Mode, Model};
use crate::ops;

/// What Grad-CAM needs from a classifier: feature maps at the tap layer and a
/// differentiable map from them to logits.
pub trait CamModel {
    fn input_size(&self) -> InputSize;
    fn class_count(&self) -> usize;
    /// `1×K×h×w` maps for a `1×C×H×W` image batch.
    fn feature_maps(&self, images: &Tensor) -> Result<Tensor>;
    /// `1×classes` logits from feature maps.
    fn logits_from_features(&self, features: &Tensor) -> Result<Tensor>;
    fn source_layer(&self) -> String;
}

impl CamModel for Model {
    fn input_size(&self) -> InputSize {
        self.spec().input_size
    }

    fn class_count(&self) -> usize {
        self.spec().class_count
    }

    fn feature_maps(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_taps(images, Mode::Eval)?.features)
    }

    fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.head(features)?.1)
    }

    fn source_layer(&self) -> String {
        format!("{}/last_conv", self.spec().name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    /// Row-major `height×width` values in `[0, 1]`.
    pub heat: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class_index: usize,
    pub source_layer: String,
    /// Set when the rectified map is identically zero.
    pub degenerate: bool,
}

impl ActivationMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.heat[y * self.width + x]
    }
}

/// Grad-CAM of `class_index` for `image`. The map has the image's own size;
/// the image is resized to the model input for the forward pass.
pub fn grad_cam<M: CamModel + ?Sized>(model: &M, image: &Image, class_index: usize) -> Result<ActivationMap> {
    let classes = model.class_count();
    if class_index >= classes {
        return Err(Error::invalid(format!("class index {class_index} out of range for {classes} classes")));
    }
    let input = model.input_size();
    if image.channels != input.channels {
        return Err(Error::invalid(format!("image has {} channels, model expects {}", image.channels, input.channels)));
    }
    let batch = stack(&[image.resize(input.height, input.width)])?;
    let features = model.feature_maps(&batch)?.detach();
    let (_, k, h, w) = features.dims4()?;
    let fvar = Var::from_tensor(&features)?;
    let logits = model.logits_from_features(fvar.as_tensor())?;
    let grads = logits.i((0, class_index))?.backward()?;
    let g = match grads.get(fvar.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?,
        None => Tensor::zeros((1, k, h, w), DType::F64, features.device())?,
    };
    let f = features.to_dtype(DType::F64)?;
    let alpha = g.mean_keepdim((2, 3))?;
    let raw = f.broadcast_mul(&alpha)?.sum_keepdim(1)?.relu()?;
    let up = ops::resize_bilinear(&raw, image.height, image.width)?;
    let mut heat: Vec<f64> = up.flatten_all()?.to_vec1()?;
    let peak = heat.iter().copied().fold(0.0f64, f64::max);
    let degenerate = !(peak > 0.0);
    if degenerate {
        heat.iter_mut().for_each(|v| *v = 0.0);
    } else {
        heat.iter_mut().for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
    }
    Ok(ActivationMap {
        heat,
        height: image.height,
        width: image.width,
        class_index,
        source_layer: model.source_layer(),
        degenerate,
    })
}

/// Grayscale heat image.
pub fn heat_image(map: &ActivationMap) -> Image {
    let data = map.heat.iter().map(|&v| v as f32).collect();
    Image::new(1, map.height, map.width, data).expect("heat matches its shape")
}

/// Blue-to-red colour ramp blended over the (grayscale-expanded) input.
pub fn overlay(map: &ActivationMap, image: &Image, alpha: f32) -> Result<Image> {
    if (image.height, image.width) != (map.height, map.width) {
        return Err(Error::invalid("overlay needs the map and image at the same size"));
    }
    let mut out = Image::filled(3, map.height, map.width, 0.0);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.at(y, x) as f32;
            let ramp = [v.min(1.0), (1.0 - (2.0 * v - 1.0).abs()).max(0.0), 1.0 - v];
            for (c, r) in ramp.iter().enumerate() {
                let base = image.at(c.min(image.channels - 1), y, x);
                *out.at_mut(c, y, x) = (1.0 - alpha) * base + alpha * r;
            }
        }
    }
    Ok(out)
}

/// Write the heat map and the overlay as PNG files.
pub fn write_cam(map: &ActivationMap, image: &Image, heat_path: &Path, overlay_path: &Path) -> Result<()> {
    heat_image(map).save_png(heat_path)?;
    overlay(map, image, 0.5)?.save_png(overlay_path)
}
