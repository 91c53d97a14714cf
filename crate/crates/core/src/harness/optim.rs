//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::model::ModelWeights;

use super::config::OptimizerConfig;
use super::HarnessError;

#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    /// Weight decay applies to matrices and embeddings, not to norm gains.
    pub fn new(config: OptimizerConfig, weights: &ModelWeights) -> Self {
        let named = weights.named();
        Self {
            config,
            m: named.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: named.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            decay: named.iter().map(|(_, t)| t.rank() >= 2).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update at learning rate `lr` and returns the gradient
    /// norm before clipping. Weights without a gradient still decay.
    pub fn step(
        &mut self,
        weights: &mut ModelWeights,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<f64, HarnessError> {
        let c = self.config;
        let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(HarnessError::Numerical(format!("gradient norm is {norm}")));
        }
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, w) in weights.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if self.decay[i] { 1.0 - lr * c.weight_decay } else { 1.0 };
            let g = grads[i].as_deref();
            for (j, x) in w.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j] * clip);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *x = *x * decay - lr * update;
            }
        }
        Ok(norm)
    }
}
