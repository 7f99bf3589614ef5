use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, ParamSet, Tensor};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self { learning_rate, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay. Moments are kept only for the tensors
/// named at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, names: params.names().to_vec(), m: zeros(), v: zeros() }
    }

    /// Restores moment buffers; shapes must match the registered tensors.
    pub fn with_state(mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self, TrainError> {
        for (cur, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if cur.shape() != new.shape() {
                return Err(shape_error(cur, new));
            }
        }
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(TrainError::Checkpoint(format!("optimizer state holds {} tensors, expected {}", m.len(), self.m.len())));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(self)
    }

    /// Names of every tensor with optimizer state.
    pub fn registered(&self) -> &[String] {
        &self.names
    }

    /// Registered tensors that also appear in `frozen`.
    pub fn frozen_overlap(&self, frozen: &ParamSet) -> usize {
        self.names.iter().filter(|n| frozen.index_of(n).is_some()).count()
    }

    /// `theta *= 1 - lr * wd`, then the bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<(), TrainError> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(TrainError::Checkpoint(format!(
                "optimizer tracks {} tensors but received {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if params.get(i).shape() != g.shape() {
                return Err(shape_error(params.get(i), g));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let theta = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in theta.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

fn shape_error(a: &Tensor, b: &Tensor) -> TrainError {
    TrainError::Numerics(NumericsError::ShapeMismatch { op: "adamw", left: a.shape().to_vec(), right: b.shape().to_vec() })
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}
