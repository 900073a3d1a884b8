use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::config::OptimizerConfig;
use crate::error::Result;
use crate::models::ParamStore;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter name; absent until the parameter first receives a gradient.
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Update every trainable parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for p in params.trainable() {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            let w = p.var.as_tensor();
            let mut g = g.clone();
            if self.weight_decay > 0.0 {
                g = (g + w.affine(self.weight_decay, 0.0)?)?;
            }
            let v = match self.velocity.get(&p.name) {
                Some(v) if self.momentum > 0.0 => (v.affine(self.momentum, 0.0)? + g)?,
                _ => g,
            };
            p.var.set(&(w - v.affine(lr, 0.0)?)?)?;
            if self.momentum > 0.0 {
                self.velocity.insert(p.name.clone(), v);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamKind;
    use candle_core::{Device, Var};

    #[test]
    fn quadratic_descent_with_momentum() {
        let mut store = ParamStore::default();
        let v = Var::new(&[3.0f64], &Device::Cpu).unwrap();
        store.push("x".into(), v.clone(), ParamKind::Trainable);
        let mut opt = Sgd::new(&OptimizerConfig { learning_rate: 0.1, momentum: 0.5, weight_decay: 0.0 });
        let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap(), 0.1).unwrap();
        // g = 6, v = 6, x = 3 - 0.6
        let x: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((x[0] - 2.4).abs() < 1e-12);
        let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap(), 0.1).unwrap();
        // g = 4.8, v = 3 + 4.8 = 7.8, x = 2.4 - 0.78
        let x: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((x[0] - 1.62).abs() < 1e-12);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::default();
        let b = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        store.push("running_mean".into(), b.clone(), ParamKind::Buffer);
        let loss = b.as_tensor().sqr().unwrap().sum_all().unwrap();
        let mut opt = Sgd::new(&OptimizerConfig::default());
        opt.step(&store, &loss.backward().unwrap(), 1.0).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0]);
    }
}
