//! Optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerConfig::Sgd { momentum } => (0.0..1.0).contains(&momentum),
        };
        if !ok {
            return Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            cfg,
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; `lr == 0` leaves every parameter bit-identical.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let ids: Vec<_> = params.ids().collect();
        match self.cfg {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (((id, g), m), v) in ids.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    }
                    if lr == 0.0 {
                        continue;
                    }
                    let p = params.get_mut(id).data_mut();
                    for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                        *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                for ((id, g), m) in ids.into_iter().zip(grads).zip(&mut self.m) {
                    for (mi, gi) in m.iter_mut().zip(g) {
                        *mi = momentum * *mi + gi;
                    }
                    if lr == 0.0 {
                        continue;
                    }
                    let p = params.get_mut(id).data_mut();
                    for (pi, mi) in p.iter_mut().zip(m.iter()) {
                        *pi -= lr * mi;
                    }
                }
            }
        }
        Ok(())
    }
}
