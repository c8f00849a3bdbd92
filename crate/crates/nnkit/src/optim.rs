//! Adam with bias correction, and global-norm gradient clipping.
//!
//! Parameters and both moment buffers are stored at single precision: every
//! update is rounded to the nearest `f32`, so a checkpoint written as `f32`
//! restores the optimiser bit-for-bit.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::params::ParamTree;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers keyed like the parameter tree.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamTree) -> Self {
        let zeros = |p: &crate::params::Param| vec![0.0; p.value.len()];
        Self {
            m: params.iter().map(|(n, p)| (n.to_string(), zeros(p))).collect(),
            v: params.iter().map(|(n, p)| (n.to_string(), zeros(p))).collect(),
            step: 0,
        }
    }

    /// Applies one update using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamTree, cfg: &AdamConfig) -> Result<()> {
        adam_update(params, self, cfg, self.step + 1)?;
        self.step += 1;
        Ok(())
    }
}

/// One Adam update at (1-based) step `t`.
pub fn adam_update(params: &mut ParamTree, state: &mut AdamState, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(NnError::Invalid("Adam step index must start at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        for i in 0..p.value.len() {
            let g = p.grad[i];
            m[i] = f32_round(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g);
            v[i] = f32_round(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g);
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.value[i] = f32_round(p.value[i] - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Rescales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the scale applied (1.0 when untouched).
pub fn clip_grad_norm(params: &mut ParamTree, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
        scale
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::new(&[1], vec![value])).unwrap();
        t.get_mut("w").unwrap().grad[0] = grad;
        t
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.2] {
            let mut p = single(0.5, g);
            let mut st = AdamState::new(&p);
            st.step(&mut p, &cfg).unwrap();
            let delta = p.get("w").unwrap().value[0] - 0.5;
            assert!((delta + cfg.lr * g.signum()).abs() < 1e-7, "delta {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.25, 0.0);
        let mut st = AdamState::new(&p);
        st.step(&mut p, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().value[0], 0.25);
    }

    #[test]
    fn step_zero_rejected() {
        let mut p = single(1.0, 1.0);
        let mut st = AdamState::new(&p);
        assert!(adam_update(&mut p, &mut st, &AdamConfig::default(), 0).is_err());
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut t = ParamTree::new();
        t.insert("a", Tensor::zeros(&[2])).unwrap();
        t.get_mut("a").unwrap().grad.copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut t, 10.0), 1.0);
        assert_eq!(t.get("a").unwrap().grad, vec![3.0, 4.0]);
        t.get_mut("a").unwrap().grad.copy_from_slice(&[12.0, 16.0]);
        assert_eq!(clip_grad_norm(&mut t, 10.0), 0.5);
        assert!((t.grad_norm() - 10.0).abs() < 1e-12);
    }
}
