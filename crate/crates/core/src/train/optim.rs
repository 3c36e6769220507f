use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterRegistry;
use crate::error::{Error, Result};
use crate::model::layers::round_f32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over the trainable parameters of a registry. Moment buffers are
/// created lazily on a parameter's first update. Updated values are rounded
/// to f32 so checkpoints store them exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        let (b1, b2) = cfg.betas;
        if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                cfg.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "adam betas ({b1}, {b2}) must lie in [0, 1)"
            )));
        }
        Ok(Self {
            cfg,
            t: 0,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using each trainable parameter's accumulated
    /// gradient multiplied by `grad_scale`. Parameters without a gradient
    /// are left alone. Returns the number of tensors updated.
    pub fn step(&mut self, reg: &mut ParameterRegistry, grad_scale: f64) -> Result<usize> {
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        let eps = self.cfg.eps;
        if self.moments.len() < reg.len() {
            self.moments.resize(reg.len(), None);
        }
        let ids: Vec<_> = reg.ids().collect();
        let mut updated = 0;
        for id in ids {
            let tensor = reg.tensor_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let n = grad.len();
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i] * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let step = m[i] / c1 / ((v[i] / c2).sqrt() + eps) + wd * *p;
                *p = round_f32(*p - lr * step);
            }
            updated += 1;
        }
        Ok(updated)
    }
}
