//! Adam over a parameter store.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Rescale the whole gradient to at most this global L2 norm.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 6.25e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradient.
    pub fn grad_norm(grads: &Gradients) -> f32 {
        grads
            .params()
            .flat_map(|(_, g)| g.data())
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Invalid(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam" });
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.params() {
            let i = id.0;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(id).data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
