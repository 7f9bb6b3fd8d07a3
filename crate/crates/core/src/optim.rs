//! Gradient-ascent optimizers.

use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoment,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state; serializable so runs can resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::AdaptiveMoment => dim,
        };
        Optimizer {
            kind,
            lr,
            steps: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        }
    }

    /// One ascent step along `gradient`. An all-zero gradient carries no
    /// signal: parameters, version and optimizer state stay untouched.
    /// Returns whether an update was applied.
    pub fn ascend(&mut self, params: &mut PolicyParams, gradient: &[f64]) -> bool {
        assert_eq!(params.theta.len(), gradient.len());
        if gradient.iter().all(|g| *g == 0.0) {
            return false;
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.theta.iter_mut().zip(gradient) {
                    *p += self.lr * g;
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let t = self.steps as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (((p, g), m), v) in params
                    .theta
                    .iter_mut()
                    .zip(gradient)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p += self.lr * m_hat / (v_hat.sqrt() + EPS);
                }
            }
        }
        params.version += 1;
        true
    }
}
