//! Adam with bias correction and the step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_epsilon")]
    pub epsilon: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_epsilon() -> f64 {
        1e-8
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: u64,
    config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step: 0,
            config,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }
}

/// One Adam update in place. Non-finite gradients are rejected before any
/// parameter or moment is touched.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            task: None,
            step: Some(state.step as usize),
        });
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let correction1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let correction2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let eps = T::from_f64_lossy(cfg.epsilon);
    let lr = T::from_f64_lossy(lr);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Learning rate halved every `halve_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub halve_every: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

impl TrainSchedule {
    /// Desk-scale default: 1e-3, halved every 4 epochs.
    pub fn desk() -> Self {
        Self {
            base_lr: 1e-3,
            halve_every: 4,
            optimizer: AdamConfig::default(),
        }
    }

    /// 1e-4 halved every 25 epochs.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 1e-4,
            halve_every: 25,
            optimizer: AdamConfig::default(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.halve_every == 0 {
            return Err(Error::Config(format!(
                "schedule needs base_lr > 0 and halve_every >= 1, got {} / {}",
                self.base_lr, self.halve_every
            )));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !o.epsilon.is_finite()
            || o.epsilon <= 0.0
        {
            return Err(Error::Config(format!("invalid Adam settings {o:?}")));
        }
        Ok(())
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5f64, -1.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn single_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 so the step is lr / (1 + eps)
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1, AdamConfig::default());
        adam_step(&mut p, &[1.0], &mut s, 0.001).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut p = vec![0.3f32, 0.3];
        let mut s = AdamState::new(2, AdamConfig::default());
        for i in 0..20 {
            let g = (i as f32 * 0.37).sin();
            adam_step(&mut p, &[g, g], &mut s, 1e-2).unwrap();
        }
        assert_eq!(p[0].to_bits(), p[1].to_bits());
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1, AdamConfig::default());
        let err = adam_step(&mut p, &[f64::NAN], &mut s, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p[0], 1.0);
        assert_eq!(s.step(), 0);
        assert!(adam_step(&mut p, &[1.0], &mut s, 0.0).is_err());
    }

    #[test]
    fn schedule_closed_form() {
        let s = TrainSchedule::full_scale();
        let lrs: Vec<f64> = (0..125).map(|e| s.lr_at(e)).collect();
        assert_eq!(lrs[0], 1e-4);
        assert_eq!(lrs[24], 1e-4);
        assert_eq!(lrs[25], 5e-5);
        assert_eq!(lrs[124], 1e-4 / 16.0);
        for (e, lr) in lrs.iter().enumerate() {
            assert_eq!(*lr, 1e-4 * 0.5f64.powi((e / 25) as i32));
        }
    }
}
