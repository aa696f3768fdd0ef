//! Multi-channel convolution blocks.
//!
//! A [`ConvBlock`] is a `c_out x c_in` grid of small stencils (3x3 or 1x1)
//! applied as a same-size correlation with zero padding and stride 1. Each
//! output channel is the sum of the per-channel 2D convolutions of the input
//! channels. The boundary rule is zero padding: the paper-facing consequence
//! is that the operator stays linear, so `apply` and `apply_transpose` are
//! exact adjoints under the tensor inner product (this is the one place the
//! discrete operator differs from periodic-PDE intuition).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    /// Stencil coefficients, laid out `[c_out][c_in][k][k]` row-major.
    weights: Vec<f64>,
}

impl ConvBlock {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::invalid(format!(
                "kernel must be 1 or 3, got {kernel}"
            )));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(ConvBlock {
            c_in,
            c_out,
            kernel,
            weights: vec![0.0; c_out * c_in * kernel * kernel],
        })
    }

    pub fn from_weights(c_in: usize, c_out: usize, kernel: usize, weights: Vec<f64>) -> Result<Self> {
        let mut block = ConvBlock::zeros(c_in, c_out, kernel)?;
        if weights.len() != block.weights.len() {
            return Err(Error::invalid(format!(
                "stencil grid needs {} coefficients for ({c_out} x {c_in}) of {kernel}x{kernel}, got {}",
                block.weights.len(),
                weights.len()
            )));
        }
        block.weights = weights;
        Ok(block)
    }

    /// Square block whose every stencil is the identity (center tap 1 on the
    /// diagonal of the channel grid).
    pub fn identity(channels: usize, kernel: usize) -> Result<Self> {
        let mut block = ConvBlock::zeros(channels, channels, kernel)?;
        let center = (kernel / 2) * kernel + kernel / 2;
        let kk = kernel * kernel;
        for c in 0..channels {
            block.weights[(c * channels + c) * kk + center] = 1.0;
        }
        Ok(block)
    }

    /// Stencils drawn i.i.d. normal with std `1/sqrt(c_in * k^2)`.
    pub fn init_random(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let mut block = ConvBlock::zeros(c_in, c_out, kernel)?;
        let std = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        for w in block.weights.iter_mut() {
            *w = rng.normal() * std;
        }
        Ok(block)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    fn stencil(&self, o: usize, i: usize) -> &[f64] {
        let kk = self.kernel * self.kernel;
        let start = (o * self.c_in + i) * kk;
        &self.weights[start..start + kk]
    }

    /// The exact adjoint as another block: channel grid transposed and every
    /// stencil flipped in both axes.
    pub fn transposed(&self) -> ConvBlock {
        let k = self.kernel;
        let kk = k * k;
        let mut weights = vec![0.0; self.weights.len()];
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                let src = self.stencil(o, i);
                let dst = &mut weights[(i * self.c_out + o) * kk..(i * self.c_out + o) * kk + kk];
                for dy in 0..k {
                    for dx in 0..k {
                        dst[dy * k + dx] = src[(k - 1 - dy) * k + (k - 1 - dx)];
                    }
                }
            }
        }
        ConvBlock {
            c_in: self.c_out,
            c_out: self.c_in,
            kernel: k,
            weights,
        }
    }

    pub fn scaled(&self, alpha: f64) -> ConvBlock {
        ConvBlock {
            c_in: self.c_in,
            c_out: self.c_out,
            kernel: self.kernel,
            weights: self.weights.iter().map(|w| w * alpha).collect(),
        }
    }

    /// Same-size correlation with zero padding: `out_o = sum_i stencil(o,i) * x_i`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.c_in {
            return Err(Error::ChannelMismatch {
                expected: self.c_in,
                got: x.channels(),
            });
        }
        let [b, _, h, w] = x.shape();
        let mut out = Tensor::zeros([b, self.c_out, h, w]);
        for bi in 0..b {
            for o in 0..self.c_out {
                // Work on a scratch row view to satisfy the borrow checker.
                let mut acc = vec![0.0; h * w];
                for i in 0..self.c_in {
                    let stencil = self.stencil(o, i);
                    let plane = x.plane(bi, i);
                    match self.kernel {
                        1 => {
                            let c = stencil[0];
                            for (a, s) in acc.iter_mut().zip(plane) {
                                *a += c * s;
                            }
                        }
                        _ => conv3x3_accumulate(plane, stencil, &mut acc, h, w),
                    }
                }
                out.plane_mut(bi, o).copy_from_slice(&acc);
            }
        }
        Ok(out)
    }

    /// Exact adjoint of [`ConvBlock::apply`], including the zero-padding
    /// boundary handling: `<K x, y> = <x, K^T y>` to roundoff.
    pub fn apply_transpose(&self, y: &Tensor) -> Result<Tensor> {
        if y.channels() != self.c_out {
            return Err(Error::ChannelMismatch {
                expected: self.c_out,
                got: y.channels(),
            });
        }
        self.transposed().apply(y)
    }

    /// Gradient of `<out_grad, apply(input)>` with respect to the stencil
    /// coefficients: the correlation of the input with the upstream gradient.
    /// Returns a buffer with the same layout as [`ConvBlock::weights`].
    pub fn weight_gradient(&self, input: &Tensor, out_grad: &Tensor) -> Result<Vec<f64>> {
        if input.channels() != self.c_in {
            return Err(Error::ChannelMismatch {
                expected: self.c_in,
                got: input.channels(),
            });
        }
        if out_grad.channels() != self.c_out {
            return Err(Error::ChannelMismatch {
                expected: self.c_out,
                got: out_grad.channels(),
            });
        }
        if input.batch() != out_grad.batch()
            || input.height() != out_grad.height()
            || input.width() != out_grad.width()
        {
            return Err(Error::ShapeMismatch {
                left: input.shape(),
                right: out_grad.shape(),
            });
        }
        let [b, _, h, w] = input.shape();
        let k = self.kernel;
        let kk = k * k;
        let mut grad = vec![0.0; self.weights.len()];
        for bi in 0..b {
            for o in 0..self.c_out {
                let g = out_grad.plane(bi, o);
                for i in 0..self.c_in {
                    let p = input.plane(bi, i);
                    let gw = &mut grad[(o * self.c_in + i) * kk..(o * self.c_in + i) * kk + kk];
                    match k {
                        1 => {
                            gw[0] += dot(g, p);
                        }
                        _ => wgrad3x3_accumulate(p, g, gw, h, w),
                    }
                }
            }
        }
        Ok(grad)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// acc[y, x] += sum_{dy,dx} stencil[dy,dx] * plane[y+dy-1, x+dx-1], zero pad.
fn conv3x3_accumulate(plane: &[f64], stencil: &[f64], acc: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        let dst = &mut acc[y * w..y * w + w];
        for dy in 0..3usize {
            let iy = y + dy;
            if iy < 1 || iy > h {
                continue;
            }
            let src = &plane[(iy - 1) * w..(iy - 1) * w + w];
            let w0 = stencil[dy * 3];
            let w1 = stencil[dy * 3 + 1];
            let w2 = stencil[dy * 3 + 2];
            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                *d += w0 * s;
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w1 * s;
            }
            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                *d += w2 * s;
            }
        }
    }
}

/// gw[dy, dx] += sum_{y,x} g[y, x] * plane[y+dy-1, x+dx-1], zero pad.
fn wgrad3x3_accumulate(plane: &[f64], g: &[f64], gw: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        let grow = &g[y * w..y * w + w];
        for dy in 0..3usize {
            let iy = y + dy;
            if iy < 1 || iy > h {
                continue;
            }
            let src = &plane[(iy - 1) * w..(iy - 1) * w + w];
            gw[dy * 3] += dot(&grow[1..], &src[..w - 1]);
            gw[dy * 3 + 1] += dot(grow, src);
            gw[dy * 3 + 2] += dot(&grow[..w - 1], &src[1..]);
        }
    }
}

#[cfg(test)]
#[allow(clippy::identity_op)]
mod tests {
    use super::*;
    use crate::tensor::inner_product;

    #[test]
    fn identity_1x1_is_identity() {
        let k = ConvBlock::identity(1, 1).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let x = Tensor::randn([2, 1, 4, 4], 1.0, &mut rng);
        assert_eq!(k.apply(&x).unwrap(), x);
        assert_eq!(k.apply_transpose(&x).unwrap(), x);
    }

    #[test]
    fn identity_3x3_is_identity() {
        let k = ConvBlock::identity(2, 3).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let x = Tensor::randn([1, 2, 5, 3], 1.0, &mut rng);
        assert_eq!(k.apply(&x).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let k = ConvBlock::zeros(2, 3, 3).unwrap();
        let x = Tensor::zeros([1, 4, 4, 4]);
        assert!(matches!(
            k.apply(&x),
            Err(Error::ChannelMismatch { expected: 2, got: 4 })
        ));
        assert!(matches!(
            k.apply_transpose(&x),
            Err(Error::ChannelMismatch { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn adjoint_identity_on_random_instances() {
        let mut rng = Rng::seed_from_u64(3);
        for kernel in [1usize, 3] {
            for trial in 0..20 {
                let k = ConvBlock::init_random(2, 3, kernel, &mut rng).unwrap();
                let x = Tensor::randn([2, 2, 4, 5], 1.0, &mut rng);
                let y = Tensor::randn([2, 3, 4, 5], 1.0, &mut rng);
                let kx = k.apply(&x).unwrap();
                let kty = k.apply_transpose(&y).unwrap();
                let lhs = inner_product(&kx, &y).unwrap();
                let rhs = inner_product(&x, &kty).unwrap();
                let tol = 1e-12 * (kx.frobenius_norm() * y.frobenius_norm() + 1.0);
                assert!(
                    (lhs - rhs).abs() <= tol,
                    "kernel {kernel} trial {trial}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn shift_stencil_transposes_to_opposite_shift() {
        // Stencil that shifts content left by one pixel; its transpose
        // shifts right (up to the zero boundary).
        let mut k = ConvBlock::zeros(1, 1, 3).unwrap();
        k.weights_mut()[1 * 3 + 2] = 1.0; // center row, right tap: out[x] = in[x+1]
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(k.apply(&x).unwrap().data(), &[2.0, 3.0, 4.0, 0.0]);
        assert_eq!(k.apply_transpose(&x).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn weight_gradient_matches_inner_product_derivative() {
        // d/dw_j <g, K(w) x> is linear in w, so the gradient equals the
        // coefficient of w_j: check against perturbing one weight.
        let mut rng = Rng::seed_from_u64(4);
        let k = ConvBlock::init_random(2, 2, 3, &mut rng).unwrap();
        let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        let g = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        let grad = k.weight_gradient(&x, &g).unwrap();
        for j in [0usize, 7, 17, 35] {
            let mut kp = k.clone();
            kp.weights_mut()[j] += 1.0;
            let before = inner_product(&k.apply(&x).unwrap(), &g).unwrap();
            let after = inner_product(&kp.apply(&x).unwrap(), &g).unwrap();
            assert!((grad[j] - (after - before)).abs() < 1e-10);
        }
    }
}
