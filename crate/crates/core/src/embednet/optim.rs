//! AdamW: Adam moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            batch_size: 8,
            epochs: 60,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update of a flat parameter vector. Non-finite gradients abort before
/// anything is modified.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, cfg: &OptimConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p = *p * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// [`adamw_step`] applied to a whole network.
pub fn adamw_step_model(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamWState,
    cfg: &OptimConfig,
) -> Result<()> {
    let mut flat = params.to_flat();
    adamw_step(&mut flat, &grads.to_flat(), state, cfg)?;
    params.set_flat(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = vec![1.5, -2.0, 0.0];
        let mut state = AdamWState::new(3);
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0; 3], &mut state, &cfg).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0, 0.0]);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut state = AdamWState::new(2);
        adamw_step(&mut p, &[0.0; 2], &mut state, &cfg).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((p[1] + 4.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = vec![0.7];
        let mut state = AdamWState::new(1);
        adamw_step(&mut p, &[1.0], &mut state, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        assert!((0.7 - p[0] - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut p = vec![1.0, 2.0];
        let mut state = AdamWState::new(2);
        let r = adamw_step(&mut p, &[0.0, f64::NAN], &mut state, &OptimConfig::default());
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.1, -0.2, 0.3];
            let mut s = AdamWState::new(3);
            for i in 0..10 {
                let g = [i as f64 * 0.1, -0.3, (i as f64).sin()];
                adamw_step(&mut p, &g, &mut s, &OptimConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
