use serde::{Deserialize, Serialize};

use super::graph::Grads;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Adamax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { kind: OptimKind::Adam, lr: 0.005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    /// Adamax at lr 0.002, the setting used for the large published models.
    pub fn adamax_preset() -> Self {
        OptimConfig { kind: OptimKind::Adamax, lr: 0.002, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimState { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One Adam-family update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Grads) -> Result<()> {
        let gs: Vec<&Tensor> = grads.tensors().collect();
        if gs.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::Contract("optimizer: parameter/gradient count mismatch".into()));
        }
        for (p, g) in params.iter().zip(&gs) {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "optimizer: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let OptimConfig { kind, lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(gs).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let gi = gd[i];
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let vi = &mut v.data_mut()[i];
                match kind {
                    OptimKind::Adam => {
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        pd[i] -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                    OptimKind::Adamax => {
                        *vi = (beta2 * *vi).max(gi.abs());
                        pd[i] -= lr / bc1 * *mi / (*vi + eps);
                    }
                }
            }
            p.check_finite("opt_step")?;
        }
        Ok(())
    }
}
