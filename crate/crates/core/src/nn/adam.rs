use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{GowebError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0 && self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0 && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(GowebError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Bias-corrected Adam update of every parameter; `t` counts from 1.
/// Gradients are cleared afterwards.
pub fn adam_step(ps: &mut ParamSet, cfg: &AdamConfig, t: u64) {
    let t = t.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in ps.iter_mut() {
        let w = p.value.as_mut_slice();
        let g = p.grad.as_mut_slice();
        let m = p.m.as_mut_slice();
        let v = p.v.as_mut_slice();
        for i in 0..w.len() {
            let gi = g[i];
            if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                continue;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            g[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::matrix::Matrix;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = ParamSet::new();
        ps.insert("w", Matrix::row_vector(vec![0.5, -1.0]));
        adam_step(&mut ps, &AdamConfig::default(), 1);
        assert_eq!(ps.value("w").as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamSet::new();
        ps.insert("w", Matrix::row_vector(vec![0.0, 0.0, 0.0]));
        ps.grad_mut("w").as_mut_slice().copy_from_slice(&[0.3, -2.0, 1e-3]);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut ps, &cfg, 1);
        // at t = 1: mhat = g, vhat = g^2, step = lr * g / (|g| + eps)
        for (w, g) in ps.value("w").as_slice().iter().zip([0.3f64, -2.0, 1e-3]) {
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
        assert!(ps.grad("w").as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut ps = ParamSet::new();
            ps.insert("w", Matrix::row_vector(vec![1.0, 2.0]));
            for t in 1..=20 {
                let w = ps.value("w").as_slice().to_vec();
                ps.grad_mut("w").as_mut_slice().copy_from_slice(&[2.0 * w[0], 2.0 * (w[1] - 3.0)]);
                adam_step(&mut ps, &AdamConfig::with_lr(0.1), t);
            }
            ps.value("w").clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
