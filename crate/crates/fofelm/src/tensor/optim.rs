//! SGD and Adam over [`ParamGroup`]s.
//!
//! Updates are "routed": when a touched set is supplied, only parameters that
//! actually appeared in the batch graph are stepped, and Adam moment state
//! advances per parameter. Non-trainable groups are never modified.

use super::{ParamGroup, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

/// Per-parameter Adam state, keyed by (group index, tensor index).
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Flattened optimizer state for checkpoints: key, moments, per-param step.
pub type OptimSlots = Vec<((usize, usize), Vec<f64>, Vec<f64>, u64)>;

#[derive(Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    slots: BTreeMap<(usize, usize), AdamSlot>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Apply one update. `touched` restricts the step to parameters that
    /// participated in the batch graph; `None` means all trainable params.
    /// Gradient accumulators of every group are cleared afterwards.
    pub fn step(&mut self, groups: &mut [ParamGroup], touched: Option<&BTreeSet<(usize, usize)>>) {
        for (gi, group) in groups.iter_mut().enumerate() {
            if group.trainable {
                for (ti, tensor) in group.tensors.iter_mut().enumerate() {
                    let in_scope = touched.is_none_or(|set| set.contains(&(gi, ti)));
                    if in_scope && tensor.grad().is_some() {
                        self.apply(gi, ti, tensor);
                    }
                }
            }
            for tensor in &mut group.tensors {
                tensor.zero_grad();
            }
        }
    }

    fn apply(&mut self, gi: usize, ti: usize, tensor: &mut Tensor) {
        let n = tensor.len();
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptKind::Sgd => {
                let grad = tensor.grad().expect("checked").to_vec();
                for (p, g) in tensor.data_mut().iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            OptKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
                let slot = self.slots.entry((gi, ti)).or_insert_with(|| AdamSlot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                slot.t += 1;
                let bc1 = 1.0 - b1.powi(slot.t as i32);
                let bc2 = 1.0 - b2.powi(slot.t as i32);
                let grad = tensor.grad().expect("checked").to_vec();
                let data = tensor.data_mut();
                for (i, &g) in grad.iter().enumerate() {
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }

    /// Export Adam state for checkpointing: key, moments, per-param step.
    pub fn export_state(&self) -> Vec<((usize, usize), AdamSlot)> {
        self.slots.iter().map(|(k, v)| (*k, v.clone())).collect()
    }

    pub fn import_state(&mut self, state: Vec<((usize, usize), AdamSlot)>) {
        self.slots = state.into_iter().collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_group(value: f64, grad: f64, trainable: bool) -> ParamGroup {
        let mut t = Tensor::from_vec(1, 1, vec![value]).unwrap();
        t.set_requires_grad(true);
        t.accumulate_grad(&[grad]);
        let mut g = ParamGroup::new("g", vec![t]);
        g.trainable = trainable;
        g
    }

    #[test]
    fn sgd_definition() {
        let mut groups = vec![one_param_group(1.0, 0.5, true)];
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut groups, None);
        assert_eq!(groups[0].tensors[0].data()[0], 0.95);
    }

    #[test]
    fn frozen_group_with_nonzero_grad_is_unchanged() {
        let mut groups = vec![one_param_group(1.0, 0.5, false)];
        let before = groups[0].le_bytes();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut groups, None);
        assert_eq!(groups[0].le_bytes(), before);
    }

    #[test]
    fn step_clears_accumulators() {
        let mut groups = vec![one_param_group(1.0, 0.5, true)];
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut groups, None);
        assert!(groups[0].tensors[0].grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_first_step_matches_scalar_oracle() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let g: f64 = 0.3;
        // Bias-corrected first step: m̂ = g, v̂ = g², so Δ = lr·g/(|g|+ε).
        let expected = 1.0 - lr * g / (g.abs() + eps);

        let mut groups = vec![one_param_group(1.0, g, true)];
        let mut cfg = OptimizerConfig::adam(lr);
        cfg.beta1 = b1;
        cfg.beta2 = b2;
        cfg.epsilon = eps;
        let mut opt = Optimizer::new(cfg);
        opt.step(&mut groups, None);
        assert!((groups[0].tensors[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn touched_set_routes_updates() {
        let mut groups = vec![
            one_param_group(1.0, 0.5, true),
            one_param_group(2.0, 0.5, true),
        ];
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        let touched: BTreeSet<_> = [(0usize, 0usize)].into_iter().collect();
        opt.step(&mut groups, Some(&touched));
        assert_eq!(groups[0].tensors[0].data()[0], 0.95);
        assert_eq!(groups[1].tensors[0].data()[0], 2.0);
        // Untouched accumulators are still cleared after the step.
        assert!(groups[1].tensors[0].grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
