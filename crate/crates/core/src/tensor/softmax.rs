use super::Tensor;
use crate::error::{Error, Result};

/// Per-pixel softmax over the last axis, computed with max-subtraction.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    const OP: &str = "softmax_channels";
    let n = logits.channels();
    if n < 2 {
        return Err(Error::invalid(OP, format!("need at least 2 classes, got {n}")));
    }
    logits.ensure_finite(OP)?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// `dL/dz_i = p_i * (g_i - sum_j p_j g_j)` for `p = softmax(z)`.
pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if probs.shape() != grad_out.shape() {
        return Err(Error::shape("softmax_channels_backward", format!("{:?}", probs.shape()), format!("{:?}", grad_out.shape())));
    }
    let n = probs.channels();
    let mut out = Tensor::zeros(probs.shape());
    for ((o, p), g) in out
        .data_mut()
        .chunks_exact_mut(n)
        .zip(probs.data().chunks_exact(n))
        .zip(grad_out.data().chunks_exact(n))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for i in 0..n {
            o[i] = p[i] * (g[i] - dot);
        }
    }
    Ok(out)
}
