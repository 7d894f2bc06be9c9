//! Same-padded, stride-1 2-D convolution over `[h, w, c]` tiles.
//!
//! Implemented as im2col followed by a GEMM: the unfolded input is a
//! `(h*w) x (k*k*c_in)` matrix and a `[k, k, c_in, c_out]` kernel is, in
//! row-major order, exactly a `(k*k*c_in) x c_out` matrix.

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl Geometry {
    fn of(op: &'static str, input: &Tensor, kernel: &Tensor) -> Result<Self> {
        let (h, w, c_in) = input.dims3(op)?;
        let [k, k2, kc, c_out] = kernel.shape()[..] else {
            return Err(Error::shape(op, "kernel [k, k, c_in, c_out]", format!("{:?}", kernel.shape())));
        };
        if k != k2 {
            return Err(Error::invalid(op, format!("non-square kernel {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(op, format!("kernel extent {k} must be odd")));
        }
        if kc != c_in {
            return Err(Error::shape(op, format!("kernel depth {c_in}"), kc));
        }
        Ok(Geometry { h, w, c_in, c_out, k })
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.c_in
    }
}

fn check_bias(op: &'static str, g: &Geometry, bias: Option<&Tensor>) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [g.c_out] => Err(Error::shape(op, format!("bias [{}]", g.c_out), format!("{:?}", b.shape()))),
        _ => Ok(()),
    }
}

/// Unfold `input` into a `(h*w) x (k*k*c)` patch matrix, zero outside the tile.
fn im2col(input: &[f64], g: &Geometry) -> Vec<f64> {
    let (h, w, c, k) = (g.h, g.w, g.c_in, g.k);
    let half = (k / 2) as isize;
    let patch = g.patch();
    let mut cols = vec![0.0; g.pixels() * patch];
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * patch..(y * w + x + 1) * patch];
            for dy in 0..k {
                let sy = y as isize + dy as isize - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = x as isize + dx as isize - half;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (dy * k + dx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the tile.
fn col2im(cols: &[f64], g: &Geometry, out: &mut [f64]) {
    let (h, w, c, k) = (g.h, g.w, g.c_in, g.k);
    let half = (k / 2) as isize;
    let patch = g.patch();
    out.iter_mut().for_each(|v| *v = 0.0);
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * patch..(y * w + x + 1) * patch];
            for dy in 0..k {
                let sy = y as isize + dy as isize - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = x as isize + dx as isize - half;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (dy * k + dx) * c;
                    for (o, v) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// `out[y,x,o] = bias[o] + sum_{dy,dx,i} input[y+dy-k/2, x+dx-k/2, i] * kernel[dy,dx,i,o]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let g = Geometry::of(OP, input, kernel)?;
    check_bias(OP, &g, bias)?;
    let mut out = Tensor::zeros(&[g.h, g.w, g.c_out]);
    conv2d_into(input.data(), &g, kernel.data(), bias.map(Tensor::data), out.data_mut());
    Ok(out)
}

fn conv2d_into(input: &[f64], g: &Geometry, kernel: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let beta = match bias {
        Some(b) => {
            for row in out.chunks_exact_mut(g.c_out) {
                row.copy_from_slice(b);
            }
            1.0
        }
        None => 0.0,
    };
    let kmat = Mat::new(kernel, g.patch(), g.c_out);
    if g.k == 1 {
        gemm(Mat::new(input, g.pixels(), g.c_in), kmat, beta, out);
    } else {
        let cols = im2col(input, g);
        gemm(Mat::new(&cols, g.pixels(), g.patch()), kmat, beta, out);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Gradients of a scalar loss with respect to the arguments of [`conv2d`].
pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<Conv2dGrads> {
    let g = Geometry::of("conv2d_backward", input, kernel)?;
    let mut grads = Conv2dGrads {
        input: Tensor::zeros(input.shape()),
        kernel: Tensor::zeros(kernel.shape()),
        bias: Tensor::zeros(&[g.c_out]),
    };
    conv2d_accumulate_backward(input, kernel, grad_out, Some(&mut grads.input), &mut grads.kernel, Some(&mut grads.bias))?;
    Ok(grads)
}

/// Backward pass that accumulates into `grad_kernel` / `grad_bias` and
/// overwrites `grad_input` when requested.
pub(crate) fn conv2d_accumulate_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    grad_input: Option<&mut Tensor>,
    grad_kernel: &mut Tensor,
    grad_bias: Option<&mut Tensor>,
) -> Result<()> {
    const OP: &str = "conv2d_backward";
    let g = Geometry::of(OP, input, kernel)?;
    if grad_out.shape() != [g.h, g.w, g.c_out] {
        return Err(Error::shape(OP, format!("grad_out [{}, {}, {}]", g.h, g.w, g.c_out), format!("{:?}", grad_out.shape())));
    }
    if grad_kernel.shape() != kernel.shape() {
        return Err(Error::shape(OP, format!("{:?}", kernel.shape()), format!("{:?}", grad_kernel.shape())));
    }
    let gout = Mat::new(grad_out.data(), g.pixels(), g.c_out);

    let cols_owned;
    let cols = if g.k == 1 {
        input.data()
    } else {
        cols_owned = im2col(input.data(), &g);
        &cols_owned[..]
    };
    let cols = Mat::new(cols, g.pixels(), g.patch());
    gemm(cols.t(), gout, 1.0, grad_kernel.data_mut());

    if let Some(gb) = grad_bias {
        check_bias(OP, &g, Some(gb))?;
        let gb = gb.data_mut();
        for row in grad_out.data().chunks_exact(g.c_out) {
            gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
        }
    }

    if let Some(gi) = grad_input {
        if gi.shape() != input.shape() {
            return Err(Error::shape(OP, format!("{:?}", input.shape()), format!("{:?}", gi.shape())));
        }
        let kmat = Mat::new(kernel.data(), g.patch(), g.c_out);
        if g.k == 1 {
            gemm(gout, kmat.t(), 0.0, gi.data_mut());
        } else {
            let mut dcols = vec![0.0; g.pixels() * g.patch()];
            gemm(gout, kmat.t(), 0.0, &mut dcols);
            col2im(&dcols, &g, gi.data_mut());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct window summation; independent of the im2col path.
    fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (h, w, ci) = input.dims3("oracle").unwrap();
        let (k, co) = (kernel.shape()[0], kernel.shape()[3]);
        let half = (k / 2) as isize;
        let mut out = Tensor::zeros(&[h, w, co]);
        for y in 0..h {
            for x in 0..w {
                for o in 0..co {
                    let mut s = bias.data()[o];
                    for dy in 0..k {
                        for dx in 0..k {
                            let (sy, sx) = (y as isize + dy as isize - half, x as isize + dx as isize - half);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for i in 0..ci {
                                s += input.get(&[sy as usize, sx as usize, i]) * kernel.get(&[dy, dx, i, o]);
                            }
                        }
                    }
                    out.set(&[y, x, o], s);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&x, &k, Some(&Tensor::vector(vec![0.0]))).unwrap();
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn ones_window_counts() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let b = Tensor::vector(vec![0.0]);
        let out = conv2d(&x, &k, Some(&b)).unwrap();
        let oracle = conv_oracle(&x, &k, &b);
        assert_eq!(out.get(&[1, 1, 0]), 9.0);
        for corner in [[0, 0, 0], [0, 2, 0], [2, 0, 0], [2, 2, 0]] {
            assert_eq!(out.get(&corner), 4.0);
        }
        assert_eq!(out, oracle);
    }

    #[test]
    fn zero_kernel_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 5, 3], &mut rng);
        let out = conv2d(&x, &Tensor::zeros(&[3, 3, 3, 2]), Some(&Tensor::zeros(&[2]))).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, h, w) in [(1, 3, 4), (3, 5, 5), (5, 4, 6)] {
            let x = random(&[h, w, 2], &mut rng);
            let kern = random(&[k, k, 2, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let got = conv2d(&x, &kern, Some(&b)).unwrap();
            let want = conv_oracle(&x, &kern, &b);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::zeros(&[3, 3, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[2, 2, 2, 1]), None).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 1, 1]), None).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 2, 1]), Some(&Tensor::zeros(&[2]))).is_err());
    }

    #[test]
    fn backward_identity_and_zero() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let go = Tensor::from_vec(&[2, 2, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let g = conv2d_backward(&x, &k, &go).unwrap();
        assert_eq!(g.input, go);

        let k3 = Tensor::full(&[3, 3, 1, 2], 0.3);
        let g = conv2d_backward(&x, &k3, &Tensor::zeros(&[2, 2, 2])).unwrap();
        assert_eq!(g.input.max_abs() + g.kernel.max_abs() + g.bias.max_abs(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 5, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let probe = random(&[5, 5, 3], &mut rng);
        // loss = <probe, conv(x)>, so grad_out = probe
        let loss = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
            let y = conv_oracle(x, k, b);
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward(&x, &k, &probe).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let n = (loss(&xp, &k, &b) - loss(&xm, &k, &b)) / (2.0 * eps);
            worst = worst.max(rel(g.input.data()[i], n));
        }
        for i in 0..k.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp.data_mut()[i] += eps;
            km.data_mut()[i] -= eps;
            let n = (loss(&x, &kp, &b) - loss(&x, &km, &b)) / (2.0 * eps);
            worst = worst.max(rel(g.kernel.data()[i], n));
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp.data_mut()[i] += eps;
            bm.data_mut()[i] -= eps;
            let n = (loss(&x, &k, &bp) - loss(&x, &k, &bm)) / (2.0 * eps);
            worst = worst.max(rel(g.bias.data()[i], n));
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }
}
