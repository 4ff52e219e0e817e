//! Adam and RAdam with externally supplied learning rates.

use serde::{Deserialize, Serialize};

use crate::params::{GradSet, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Radam { beta1: f64, beta2: f64, eps: f64 },
}

/// First/second moment state shared by both update rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { kind, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradSet, lr: f64) {
        assert_eq!(grads.0.len(), store.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2, eps, rect) = match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => (beta1, beta2, eps, None),
            OptimizerKind::Radam { beta1, beta2, eps } => {
                let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
                let b2t = beta2.powf(t);
                let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
                let r = if rho_t > 5.0 {
                    Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
                } else {
                    None
                };
                (beta1, beta2, eps, Some(r))
            }
        };
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for ((p, g), (m, v)) in store.values_mut().iter_mut().zip(&grads.0).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let update = match rect {
                    None => mhat / ((vd[i] / bc2).sqrt() + eps),
                    Some(Some(r)) => r * mhat / ((vd[i] / bc2).sqrt() + eps),
                    // variance not yet tractable: un-adapted momentum step
                    Some(None) => mhat,
                };
                pd[i] -= lr * update;
            }
        }
    }
}
