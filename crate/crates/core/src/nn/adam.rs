use serde::{Deserialize, Serialize};

use super::{Module, ParamKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient λ of the `λ‖w‖²` penalty on convolution weights.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            l2: 1e-4,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
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

    #[inline]
    fn update(&mut self, i: usize, p: &mut f64, g: f64, cfg: &AdamConfig, c1: f64, c2: f64) {
        self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
        self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = self.m[i] / c1;
        let v_hat = self.v[i] / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }

    fn advance(&mut self, cfg: &AdamConfig) -> (f64, f64) {
        self.t += 1;
        let t = self.t as i32;
        (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
    }

    /// One update of every tensor of `model` whose name passes `trainable`.
    ///
    /// Convolution weights receive the extra gradient `2·λ·w`. Tensors that
    /// are not trainable are left bit-identical and their moments untouched.
    pub fn step_module<M: Module>(
        &mut self,
        model: &mut M,
        grad: &M,
        cfg: &AdamConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let g = grad.flatten();
        let n = model.param_count();
        if g.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} parameters, {} gradients", g.len())));
        }
        if self.m.len() != n {
            if self.t != 0 {
                return Err(Error::ShapeMismatch(format!("state holds {} moments, model {n} parameters", self.m.len())));
            }
            *self = AdamState::new(n);
        }
        let (c1, c2) = self.advance(cfg);
        let mut off = 0;
        model.visit_mut("", &mut |name, kind, t| {
            let len = t.numel();
            if trainable(name) {
                let l2 = if kind == ParamKind::ConvWeight { 2.0 * cfg.l2 } else { 0.0 };
                for (j, p) in t.data.iter_mut().enumerate() {
                    let gi = g[off + j] + l2 * *p;
                    self.update(off + j, p, gi, cfg, c1, c2);
                }
            }
            off += len;
        });
        Ok(())
    }
}

/// Plain Adam update on flat arrays (no regularization).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let (c1, c2) = state.advance(cfg);
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g, cfg, c1, c2);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv1d, Dense};
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        assert_abs_diff_eq!(p[0], -1e-3 / (1.0 + 1e-7), epsilon = 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let cfg = AdamConfig::default();
        let mut p = [0.3, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(2);
        assert!(matches!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut s, &cfg), Err(Error::ShapeMismatch(_))));
    }

    // Reference written directly from the update equations, one scalar at a time.
    #[test]
    fn quadratic_trajectory_matches_reference() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let target = [1.0, -3.0, 0.5];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        let (mut rp, mut rm, mut rv) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
        for t in 1..=10 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, c)| 2.0 * (x - c)).collect();
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            for i in 0..3 {
                let gi = 2.0 * (rp[i] - target[i]);
                rm[i] = 0.9 * rm[i] + 0.1 * gi;
                rv[i] = 0.999 * rv[i] + 0.001 * gi * gi;
                let mh = rm[i] / (1.0 - 0.9f64.powi(t));
                let vh = rv[i] / (1.0 - 0.999f64.powi(t));
                rp[i] -= 0.05 * mh / (vh.sqrt() + 1e-7);
            }
        }
        for i in 0..3 {
            assert_abs_diff_eq!(p[i], rp[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn l2_applies_to_conv_weights_only() {
        let cfg = AdamConfig::default();
        let mut conv = Conv1d::new(1, 1, 1);
        conv.weight.data = vec![0.5];
        conv.bias.data = vec![0.5];
        let grad = Conv1d::new(1, 1, 1);
        AdamState::default().step_module(&mut conv, &grad, &cfg, |_| true).unwrap();
        assert!(conv.weight.data[0] < 0.5);
        assert_eq!(conv.bias.data[0], 0.5);

        let mut dense = Dense::new(1, 1);
        dense.weight.data = vec![0.5];
        AdamState::default().step_module(&mut dense, &Dense::new(1, 1), &cfg, |_| true).unwrap();
        assert_eq!(dense.weight.data[0], 0.5);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let cfg = AdamConfig::default();
        let mut conv = Conv1d::new(1, 1, 1);
        conv.weight.data = vec![0.5];
        let mut grad = Conv1d::new(1, 1, 1);
        grad.weight.data = vec![1.0];
        grad.bias.data = vec![1.0];
        AdamState::default().step_module(&mut conv, &grad, &cfg, |n| n == "bias").unwrap();
        assert_eq!(conv.weight.data[0], 0.5);
        assert!(conv.bias.data[0] < 0.0);
    }
}
