use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (sgd, adam)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm threshold.
    pub clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Rescale `grads` so their joint L2 norm is at most `threshold`.
/// Returns the norm before clipping and whether it fired.
pub fn clip_global_norm(grads: &mut [Tensor], threshold: f64) -> (f64, bool) {
    let norm = global_norm(grads);
    if norm > threshold {
        let s = threshold / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        (norm, true)
    } else {
        (norm, false)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[&Parameter]) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.eps <= 0.0 {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if let Some(c) = config.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip threshold must be > 0, got {c}")));
            }
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Ok(Optimizer { config, t: 0, m: zeros(), v: zeros() })
    }

    /// Apply one update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, params: Vec<&mut Parameter>, mut grads: Vec<Tensor>) -> Result<StepReport> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape("optimizer_step", self.m.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", format!("{} {:?}", p.name, p.value.shape()), format!("{:?}", g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        let (grad_norm, clipped) = match self.config.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => (global_norm(&grads), false),
        };
        self.t += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(&grads) {
                    p.value.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= c.lr * g);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.into_iter().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
                    let w = p.value.data_mut();
                    for i in 0..w.len() {
                        let gi = g.data()[i];
                        let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                        let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        w[i] -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(StepReport { grad_norm, clipped })
    }
}
