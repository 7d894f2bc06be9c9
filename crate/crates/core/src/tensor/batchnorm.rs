use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running value in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel running mean and (population) variance used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: Tensor::zeros(&[channels]), var: Tensor::full(&[channels], 1.0) }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Fold the statistics of one train-mode call into the running averages.
    pub fn update(&mut self, cache: &BatchNormCache) {
        let m = BN_MOMENTUM;
        for (r, b) in self.mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(&cache.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Values retained from a train-mode forward call for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    x_hat: Tensor,
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = x.channels();
    if x.rank() < 2 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("gamma/beta [{c}]"),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    Ok(c)
}

/// Normalize with in-tile per-channel statistics.
pub(crate) fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BatchNormCache)> {
    let c = check(x, gamma, beta)?;
    let n = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for i in 0..c {
            let d = row[i] - mean[i];
            var[i] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

    let mut x_hat = x.clone();
    let mut y = x.clone();
    for (xh, yr) in x_hat.data_mut().chunks_exact_mut(c).zip(y.data_mut().chunks_exact_mut(c)) {
        for i in 0..c {
            xh[i] = (xh[i] - mean[i]) * inv_std[i];
            yr[i] = gamma.data()[i] * xh[i] + beta.data()[i];
        }
    }
    Ok((y, BatchNormCache { mean, var, inv_std, x_hat }))
}

pub(crate) fn batch_norm_infer(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<Tensor> {
    let c = check(x, gamma, beta)?;
    if stats.channels() != c {
        return Err(Error::shape("batch_norm", c, stats.channels()));
    }
    let scale: Vec<f64> = (0..c)
        .map(|i| gamma.data()[i] / (stats.var.data()[i] + BN_EPSILON).sqrt())
        .collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for i in 0..c {
            row[i] = (row[i] - stats.mean.data()[i]) * scale[i] + beta.data()[i];
        }
    }
    Ok(y)
}

/// Batch normalization over all pixels of a tile. Train mode also folds the
/// tile statistics into `stats`.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &mut RunningStats, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            if stats.channels() != x.channels() {
                return Err(Error::shape("batch_norm", x.channels(), stats.channels()));
            }
            let (y, cache) = batch_norm_train(x, gamma, beta)?;
            stats.update(&cache);
            Ok(y)
        }
        Mode::Infer => batch_norm_infer(x, gamma, beta, stats),
    }
}

/// Train-mode gradient: returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(cache: &BatchNormCache, gamma: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let c = gamma.len();
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::shape("batch_norm_backward", format!("{:?}", cache.x_hat.shape()), format!("{:?}", grad_out.shape())));
    }
    let n = (grad_out.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (g, xh) in grad_out.data().chunks_exact(c).zip(cache.x_hat.data().chunks_exact(c)) {
        for i in 0..c {
            dbeta[i] += g[i];
            dgamma[i] += g[i] * xh[i];
        }
    }
    let mut dx = grad_out.clone();
    for (d, xh) in dx.data_mut().chunks_exact_mut(c).zip(cache.x_hat.data().chunks_exact(c)) {
        for i in 0..c {
            let k = gamma.data()[i] * cache.inv_std[i] / n;
            d[i] = k * (n * d[i] - dbeta[i] - xh[i] * dgamma[i]);
        }
    }
    Ok((dx, Tensor::vector(dgamma), Tensor::vector(dbeta)))
}
