use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Default negative slope of the leaky ReLU.
pub const LEAKY_RELU_ALPHA: f64 = 0.1;

/// Element-wise non-linearities with their gradient rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if v >= 0.0 {
                    v
                } else {
                    alpha * v
                }
            }
        }
    }

    /// Derivative at `input`, given `output = apply(input)`.
    #[inline]
    pub fn derivative(self, input: f64, output: f64) -> f64 {
        match self {
            Activation::Sigmoid => output * (1.0 - output),
            Activation::Tanh => 1.0 - output * output,
            Activation::Relu => {
                if input > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(alpha) => {
                if input >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply(v))
    }

    pub fn backward(self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        same_shape("activation_backward", input, output)?;
        same_shape("activation_backward", input, grad_out)?;
        let data = input
            .data()
            .iter()
            .zip(output.data())
            .zip(grad_out.data())
            .map(|((&x, &y), &g)| g * self.derivative(x, y))
            .collect();
        Tensor::from_vec(input.shape(), data)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())))
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// Hadamard product. Its gradient is `(grad * b, grad * a)`.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

/// Concatenate two tensors along the channel (last) axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::shape("concat_channels", format!("{sa:?}"), format!("{sb:?}")));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::from_vec(&shape, data)
}

/// Inverse of [`concat_channels`]; also its gradient rule.
pub fn split_channels(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let c = t.channels();
    if first == 0 || first >= c {
        return Err(Error::invalid("split_channels", format!("cannot split {c} channels at {first}")));
    }
    let rows = t.len() / c;
    let mut a = Vec::with_capacity(rows * first);
    let mut b = Vec::with_capacity(rows * (c - first));
    for row in t.data().chunks_exact(c) {
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    let mut sa = t.shape().to_vec();
    let mut sb = sa.clone();
    *sa.last_mut().unwrap() = first;
    *sb.last_mut().unwrap() = c - first;
    Ok((Tensor::from_vec(&sa, a)?, Tensor::from_vec(&sb, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert!((Activation::LeakyRelu(0.1).apply(-2.0) + 0.2).abs() < 1e-15);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn concat_preserves_order_and_splits_back() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 2, 4]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn elementwise_shape_errors() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
        assert!(concat_channels(&Tensor::zeros(&[2, 1]), &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn activation_gradients_match_central_differences() {
        let xs = [-2.3, -0.7, -0.05, 0.04, 0.6, 1.9];
        let eps = 1e-6;
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Relu, Activation::LeakyRelu(0.1)] {
            for &x in &xs {
                let num = (act.apply(x + eps) - act.apply(x - eps)) / (2.0 * eps);
                let ana = act.derivative(x, act.apply(x));
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
                assert!(rel < 1e-5, "{act:?} at {x}: {ana} vs {num}");
            }
        }
    }
}
