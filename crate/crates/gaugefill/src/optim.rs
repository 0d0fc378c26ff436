//! Adam optimizer and the warmup learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update over all parameters.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        params: &mut [Tensor],
        grads: &[Vec<f64>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(
                "adam_step",
                format!(
                    "parameter/gradient/state count mismatch: {} params, {} grads, {} states",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::contract("adam_step", format!("bad lr {lr}")));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.len() != p.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient length {} vs parameter {}", g.len(), p.numel()),
                ));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric { op: "adam_step" });
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if cfg.weight_decay > 0.0 {
                    data[i] -= lr * cfg.weight_decay * data[i];
                }
                data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Inverse-square-root warmup schedule:
/// `lr = scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
///
/// Rises linearly for `warmup` steps, then decays as `1/sqrt(step)`.
pub fn warmup_lr(step: u64, warmup_steps: u64, model_dim: usize, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("warmup_lr", "step must be >= 1"));
    }
    if warmup_steps == 0 || model_dim == 0 {
        return Err(Error::contract(
            "warmup_lr",
            "warmup steps and model dim must be >= 1",
        ));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(scale * (model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_closed_form_values() {
        // Peak at the warmup step: 16^-0.5 * 1200^-0.5.
        let peak = warmup_lr(1200, 1200, 16, 1.0).unwrap();
        assert!((peak - 7.2169e-3).abs() < 1e-6, "peak={peak}");
        let first = warmup_lr(1, 1200, 16, 1.0).unwrap();
        assert!((first - 6.0140e-6).abs() < 1e-9, "first={first}");
    }

    #[test]
    fn warmup_monotone_rise_then_fall() {
        let mut prev = 0.0;
        for s in 1..=1200 {
            let lr = warmup_lr(s, 1200, 16, 1.0).unwrap();
            assert!(lr >= prev, "rising phase violated at {s}");
            prev = lr;
        }
        for s in 1201..=2400 {
            let lr = warmup_lr(s, 1200, 16, 1.0).unwrap();
            assert!(lr <= prev, "decay phase violated at {s}");
            prev = lr;
        }
    }

    #[test]
    fn warmup_step_zero_is_contract_violation() {
        assert!(warmup_lr(0, 1200, 16, 1.0).is_err());
    }

    #[test]
    fn first_step_has_magnitude_close_to_lr() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![vec![0.5, -0.25]];
        let mut state = AdamState::new(&params);
        state.step(&cfg, 1e-3, &mut params, &grads).unwrap();
        // At t=1 bias correction makes m_hat = g and v_hat = g^2, so the
        // update is lr * sign(g) up to eps.
        assert!((params[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((params[0].data()[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::vector(vec![3.0, -4.0])];
        let grads = vec![vec![0.0, 0.0]];
        let mut state = AdamState::new(&params);
        state.step(&cfg, 1e-2, &mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[3.0, -4.0]);
    }

    #[test]
    fn constant_gradient_updates_match_scalar_recurrence() {
        // Independent scalar oracle for the Adam recurrence.
        let cfg = AdamConfig::default();
        let g = 0.3;
        let lr = 1e-2;
        let mut oracle_p = 1.0;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut oracle_updates = Vec::new();
        for t in 1..=2 {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            let upd = lr * m_hat / (v_hat.sqrt() + cfg.eps);
            oracle_updates.push(upd);
            oracle_p -= upd;
        }

        let mut params = vec![Tensor::vector(vec![1.0])];
        let grads = vec![vec![g]];
        let mut state = AdamState::new(&params);
        let before = params[0].data()[0];
        state.step(&cfg, lr, &mut params, &grads).unwrap();
        let after_one = params[0].data()[0];
        state.step(&cfg, lr, &mut params, &grads).unwrap();
        let after_two = params[0].data()[0];

        assert!((after_two - oracle_p).abs() < 1e-15);
        let upd1 = before - after_one;
        let upd2 = after_one - after_two;
        assert!(upd2 <= upd1 + 1e-12, "second update {upd2} > first {upd1}");
        assert!((upd1 - oracle_updates[0]).abs() < 1e-15);
        assert!((upd2 - oracle_updates[1]).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_numeric_fault() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::vector(vec![1.0])];
        let grads = vec![vec![f64::NAN]];
        let mut state = AdamState::new(&params);
        assert!(matches!(
            state.step(&cfg, 1e-3, &mut params, &grads),
            Err(Error::Numeric { .. })
        ));
    }
}
