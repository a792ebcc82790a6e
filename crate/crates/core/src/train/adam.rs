//! Adam with classic (coupled) weight decay: `wd · θ` is added to the
//! gradient before the moment updates.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "lr must be nonnegative, got {}", self.lr);
        ensure!((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)");
        ensure!((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be nonnegative");
        Ok(())
    }
}

/// One bias-corrected update of `params` in place. `t` is the 1-based step
/// number.
pub fn adam_step(params: &mut [f32], grads: &[f32], m: &mut [f32], v: &mut [f32], t: u64, cfg: &AdamConfig) {
    assert!(t >= 1, "adam steps are numbered from 1");
    assert!(params.len() == grads.len() && m.len() == params.len() && v.len() == params.len());
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i] as f64 + cfg.weight_decay * params[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        params[i] = (params[i] as f64 - update) as f32;
    }
}

/// Moments for every parameter of a graph, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(graph: &Graph, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = graph.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one step to the parameters that have gradients. Fails before
    /// touching anything if a gradient is not finite.
    pub fn step(&mut self, graph: &mut Graph, grads: &[(ParamId, Vec<f32>)]) -> Result<()> {
        for (id, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at index {i}",
                    graph.param(*id).name
                )));
            }
        }
        self.step += 1;
        for (id, g) in grads {
            let p = graph.param_mut(*id);
            adam_step(&mut p.data, g, &mut self.m[id.0], &mut self.v[id.0], self.step, &self.config);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![1.5f32, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.0f32, 0.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[3.0, -0.01], &mut m, &mut v, 1, &cfg);
        assert!((p[0] + 1e-3).abs() < 1e-8);
        assert!((p[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut x = vec![5.0f32];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=500 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut m, &mut v, t, &cfg);
        }
        assert!(x[0].abs() < 1e-2, "{}", x[0]);
    }

    #[test]
    fn zero_lr_is_inert() {
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        let mut p = vec![0.7f32];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut p, &[123.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p, vec![0.7]);
    }
}
