//! SGD with momentum and coupled weight decay, plus the cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.04,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight decay {} is negative", self.weight_decay)));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!("learning rate {} is not a finite non-negative number", self.base_lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Param], cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }
}

/// `v ← μv + g + λθ`, `θ ← θ − lr·v`, applied to every parameter.
///
/// Nothing is updated if any gradient is non-finite.
pub fn sgd_step(params: &mut [Param], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name)));
        }
    }
    let (mu, lambda) = (state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((theta, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi + lambda * *theta;
            *theta -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub base_lr: f64,
}

/// `α₀·(1 + cos(πt/T))/2`.
pub fn cosine_lr(t: usize, s: &ScheduleConfig) -> Result<f64> {
    if s.total_steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if t > s.total_steps {
        return Err(Error::contract(format!("step {t} past the end of a {}-step schedule", s.total_steps)));
    }
    let frac = t as f64 / s.total_steps as f64;
    Ok(s.base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Param> {
        vec![Param { name: "w".into(), value: Tensor::vector(&[v]) }]
    }

    #[test]
    fn schedule_examples() {
        let s = ScheduleConfig { total_steps: 100, base_lr: 0.04 };
        assert_eq!(cosine_lr(0, &s).unwrap(), 0.04);
        assert!(cosine_lr(100, &s).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, &s).unwrap() - 0.02).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, &s), Err(Error::Contract(_))));
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(t, &s).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = one(1.0);
        let cfg = OptimizerConfig { base_lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut st = OptimizerState::new(&p, &cfg).unwrap();
        sgd_step(&mut p, &[Tensor::vector(&[2.0])], &mut st, 0.1).unwrap();
        assert!((p[0].value.data()[0] - 0.8).abs() < 1e-15);
        sgd_step(&mut p, &[Tensor::vector(&[0.0])], &mut st, 0.1).unwrap();
        assert!((p[0].value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = one(0.0);
        let cfg = OptimizerConfig { base_lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut st = OptimizerState::new(&p, &cfg).unwrap();
        sgd_step(&mut p, &[Tensor::vector(&[1.0])], &mut st, 0.1).unwrap();
        let first = p[0].value.data()[0];
        sgd_step(&mut p, &[Tensor::vector(&[1.0])], &mut st, 0.1).unwrap();
        let second = p[0].value.data()[0] - first;
        assert!((first + 0.1).abs() < 1e-15);
        assert!((second + 1.9 * 0.1).abs() < 1e-15);
        assert!((p[0].value.data()[0] + 2.9 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut p = one(2.0);
        let cfg = OptimizerConfig { base_lr: 0.1, momentum: 0.0, weight_decay: 0.5 };
        let mut st = OptimizerState::new(&p, &cfg).unwrap();
        sgd_step(&mut p, &[Tensor::vector(&[0.0])], &mut st, 0.1).unwrap();
        assert!((p[0].value.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one(1.0);
        let mut st = OptimizerState::new(&p, &OptimizerConfig::default()).unwrap();
        let err = sgd_step(&mut p, &[Tensor::vector(&[f64::NAN])], &mut st, 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains('w')));
        assert_eq!(p[0].value.data()[0], 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig { momentum: 1.0, ..OptimizerConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = OptimizerConfig { weight_decay: -1.0, ..OptimizerConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
