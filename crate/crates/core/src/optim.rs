//! Optimizers. Each owns per-parameter state keyed by name and zeroes the
//! gradients it consumes.

use std::collections::HashMap;

use log::warn;

use crate::params::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW { lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    /// SGD with heavy-ball momentum and L2 weight decay.
    Sgd { lr: f64, momentum: f64, weight_decay: f64 },
}

#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    /// Parameters skipped because they carried no gradient buffer.
    pub missing_grad: usize,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    state: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, steps: 0, state: HashMap::new() }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay })
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd { lr, momentum, weight_decay })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.kind {
            OptimizerKind::AdamW { lr, .. } | OptimizerKind::Sgd { lr, .. } => *lr = new_lr,
        }
    }

    /// Applies one update to every parameter of `group` that has a
    /// gradient, then zeroes those gradients.
    pub fn step(&mut self, group: &ParamGroup) -> StepReport {
        self.steps += 1;
        let t = self.steps as i32;
        let mut report = StepReport::default();
        for (name, p) in group.iter() {
            let mut grad_slot = p.grad_ref_mut();
            let Some(grad) = grad_slot.as_mut() else {
                report.missing_grad += 1;
                continue;
            };
            let mut data = p.data_mut();
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { first: vec![0.0; data.len()], second: Vec::new() });
            debug_assert_eq!(st.first.len(), data.len(), "optimizer state shape drift for {name}");
            match self.kind {
                OptimizerKind::AdamW { lr, beta1, beta2, eps, weight_decay } => {
                    if st.second.is_empty() {
                        st.second = vec![0.0; data.len()];
                    }
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..data.len() {
                        let g = grad[i];
                        st.first[i] = beta1 * st.first[i] + (1.0 - beta1) * g;
                        st.second[i] = beta2 * st.second[i] + (1.0 - beta2) * g * g;
                        let m_hat = st.first[i] / bc1;
                        let v_hat = st.second[i] / bc2;
                        data[i] -= lr * weight_decay * data[i];
                        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { lr, momentum, weight_decay } => {
                    for i in 0..data.len() {
                        let g = grad[i] + weight_decay * data[i];
                        st.first[i] = momentum * st.first[i] + g;
                        data[i] -= lr * st.first[i];
                    }
                }
            }
            grad.iter_mut().for_each(|v| *v = 0.0);
            report.updated += 1;
        }
        if report.missing_grad > 0 {
            warn!(
                "optimizer step on group {}: {} parameter(s) without gradients left untouched",
                group.name(),
                report.missing_grad
            );
        }
        report
    }
}
