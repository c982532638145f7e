//! First-order optimizers over a model's trainable parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 + cos(pi t / T)) / 2`.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Decoupled decay, applied to trainable parameters only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD only.
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, weight_decay: 0.0, momentum: 0.0, schedule: LrSchedule::Constant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bad.push("optimizer.lr");
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("optimizer.weight_decay");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad.push("optimizer.beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad.push("optimizer.beta2");
        }
        if !(self.eps > 0.0) {
            bad.push("optimizer.eps");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push("optimizer.momentum");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config("invalid optimizer settings", &bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer buffers; one entry per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: usize,
    pub total_steps: usize,
    buffers: BTreeMap<ParamId, Moments>,
}

impl OptimState {
    pub fn new(config: OptimConfig, model: &Model, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let buffers = model
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let n = model.param(id).tensor.len();
                let second = if config.kind == OptimizerKind::Adamw { vec![0.0; n] } else { Vec::new() };
                (id, Moments { first: vec![0.0; n], second })
            })
            .collect();
        Ok(Self { config, step: 0, total_steps: total_steps.max(1), buffers })
    }

    pub fn buffered_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.buffers.keys().copied()
    }

    /// Learning rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::Cosine => {
                let t = self.step.min(self.total_steps) as f64 / self.total_steps as f64;
                self.config.lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// A trainable parameter without a gradient is updated as if its gradient were zero.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (&id, m) in self.buffers.iter_mut() {
            let tensor = &mut model.param_mut(id).tensor;
            let grad = tensor.grad.take().unwrap_or_else(|| vec![0.0; tensor.len()]);
            if grad.len() != m.first.len() {
                return Err(Error::Dimension(format!("optimizer buffer for param {id} has the wrong length")));
            }
            let data = tensor.data_mut();
            match c.kind {
                OptimizerKind::Adamw => {
                    for i in 0..data.len() {
                        let g = grad[i];
                        m.first[i] = c.beta1 * m.first[i] + (1.0 - c.beta1) * g;
                        m.second[i] = c.beta2 * m.second[i] + (1.0 - c.beta2) * g * g;
                        let mhat = m.first[i] / bias1;
                        let vhat = m.second[i] / bias2;
                        data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[i]);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..data.len() {
                        let g = grad[i] + c.weight_decay * data[i];
                        m.first[i] = c.momentum * m.first[i] + g;
                        data[i] -= lr * m.first[i];
                    }
                }
            }
        }
        model.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    fn model() -> Model {
        build_model(&ModelSpec::mlp(vec![3, 4, 2]), 0).unwrap()
    }

    #[test]
    fn buffers_only_for_trainable() {
        let m = model();
        let st = OptimState::new(OptimConfig::default(), &m, 10).unwrap();
        let ids: Vec<_> = st.buffered_params().collect();
        assert_eq!(ids, m.trainable_ids());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut m = model();
        let before = m.clone();
        let mut st = OptimState::new(OptimConfig { lr: 0.0, ..OptimConfig::default() }, &m, 10).unwrap();
        for id in m.trainable_ids() {
            let n = m.param(id).tensor.len();
            m.param_mut(id).tensor.accumulate_grad(&vec![1.0; n]);
        }
        st.step(&mut m).unwrap();
        for (p, q) in m.params().iter().zip(before.params()) {
            assert!(p.tensor.bit_eq(&q.tensor));
        }
    }

    #[test]
    fn first_adamw_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2 on step one, so the move is lr * g / (|g| + eps).
        let mut m = model();
        let id = m.trainable_ids()[0];
        let before = m.param(id).tensor.clone();
        let cfg = OptimConfig { weight_decay: 0.0, schedule: LrSchedule::Constant, ..OptimConfig::default() };
        let mut st = OptimState::new(cfg, &m, 10).unwrap();
        let n = before.len();
        let g: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.5 } else { -2.0 }).collect();
        m.param_mut(id).tensor.accumulate_grad(&g);
        st.step(&mut m).unwrap();
        for ((new, old), g) in m.param(id).tensor.data().iter().zip(before.data()).zip(&g) {
            let want = old - 1e-3 * g / (g.abs() + 1e-8);
            assert!((new - want).abs() < 1e-15);
        }
        assert!(m.param(id).tensor.grad.is_none());
    }

    #[test]
    fn cosine_lr_decays_to_zero() {
        let m = model();
        let mut st = OptimState::new(OptimConfig::default(), &m, 4).unwrap();
        assert_eq!(st.current_lr(), 1e-3);
        st.step = 2;
        assert!((st.current_lr() - 5e-4).abs() < 1e-18);
        st.step = 4;
        assert!(st.current_lr().abs() < 1e-18);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut m = model();
        let id = m.trainable_ids()[0];
        let before = m.param(id).tensor.clone();
        let mut st = OptimState::new(OptimConfig::sgd(0.5), &m, 1).unwrap();
        m.param_mut(id).tensor.accumulate_grad(&vec![2.0; before.len()]);
        st.step(&mut m).unwrap();
        for (new, old) in m.param(id).tensor.data().iter().zip(before.data()) {
            assert_eq!(*new, old - 1.0);
        }
    }

    #[test]
    fn invalid_settings_list_keys() {
        let cfg = OptimConfig { lr: -1.0, beta2: 1.5, ..OptimConfig::default() };
        match cfg.validate() {
            Err(Error::Config { keys, .. }) => assert_eq!(keys, vec!["optimizer.lr", "optimizer.beta2"]),
            other => panic!("{other:?}"),
        }
    }
}
