//! Adam over the encoder's named parameter tensors.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::encoder::EncoderParams;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Accumulates per-parameter gradients across the graphs of a batch.
#[derive(Debug, Default)]
pub struct GradAccum {
    grads: BTreeMap<String, Tensor>,
}

impl GradAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, grad: &Tensor) {
        match self.grads.get_mut(name) {
            Some(t) => {
                for (o, g) in t.values_mut().iter_mut().zip(grad.values()) {
                    *o += g;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.values_mut() {
            for v in t.values_mut() {
                *v *= factor;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &GradAccum) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, tensor) in params.named_tensors_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; tensor.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; tensor.len()]);
            let gv = g.values();
            let pv = tensor.values_mut();
            for i in 0..pv.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gv[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gv[i] * gv[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pv[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}
