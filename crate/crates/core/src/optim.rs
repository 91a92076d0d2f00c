//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Applies one update to `params`. `grads` must already be clipped.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ModelParameters, grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer/parameter size mismatch".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let delta: Vec<f64> = grads
            .iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .map(|((&g, m), v)| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                -cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps)
            })
            .collect();
        params.apply_update(&delta)?;
        params.step += 1;
        Ok(())
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![6.0, 8.0];
        let before = clip_global_norm(&mut g, 5.0);
        assert_eq!(before, 10.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
        let mut small = vec![0.3, 0.4];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = ModelParameters::init(ModelConfig::default(), 0).unwrap();
        let before = params.values().to_vec();
        let mut state = AdamState::new(params.len());
        let grads: Vec<f64> = (0..params.len()).map(|i| if i % 2 == 0 { 1.0 } else { -2.0 }).collect();
        state.step(&AdamConfig::default(), &mut params, &grads).unwrap();
        for (i, (a, b)) in params.values().iter().zip(&before).enumerate() {
            let expected = if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!((a - b - expected).abs() < 1e-9);
        }
        assert_eq!(params.step, 1);
    }
}
