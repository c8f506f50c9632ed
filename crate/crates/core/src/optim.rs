//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-2,
        }
    }
}

pub struct AdamState {
    pub step: u64,
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
        }
    }

    /// One update. A missing gradient is treated as zero (weight decay still
    /// applies). Deterministic given identical inputs.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Option<Tensor>],
        names: &[String],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (idx, p) in params.iter_mut().enumerate() {
            if let Some(g) = &grads[idx] {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGrad(names[idx].clone()));
                }
            }
            let zero = 0.0;
            for j in 0..p.data.len() {
                let g = grads[idx].as_ref().map_or(zero, |g| g.data[j]);
                let m = &mut self.m[idx].data[j];
                let v = &mut self.v[idx].data[j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                // decoupled weight decay on the incoming parameter value
                let decay = c.lr * c.weight_decay * p.data[j];
                p.data[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                p.data[j] -= decay;
            }
        }
        Ok(())
    }
}
