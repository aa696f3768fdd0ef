//! Dense 4-axis tensors.
//!
//! The axis ordering is fixed repo-wide as (batch, channel, height, width),
//! stored row-major, so `index = ((b*C + c)*H + y)*W + x`. Operations are pure:
//! they never mutate their inputs and return freshly allocated results, which
//! makes them safe to evaluate concurrently. There is no broadcasting beyond
//! scalar-with-tensor.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::invalid(format!(
                "value count {} does not match shape {:?} (needs {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// I.i.d. standard normal entries scaled by `std`.
    pub fn randn(shape: [usize; 4], std: f64, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.normal() * std).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// The (height*width) slice of one channel of one example.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        let data = self.data.iter().map(|a| a * alpha).collect();
        Tensor {
            shape: self.shape,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor {
            shape: self.shape,
            data,
        }
    }

    /// self += alpha * other, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

pub fn inner_product(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x * y)
        .sum::<f64>())
}

/// Split along the channel axis into two equal halves.
pub fn split_channels(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let [b, c, h, w] = x.shape();
    if c % 2 != 0 {
        return Err(Error::invalid(format!(
            "channel count {c} is odd; cannot partition into (Y, Z)"
        )));
    }
    let half = c / 2;
    let mut first = Tensor::zeros([b, half, h, w]);
    let mut second = Tensor::zeros([b, half, h, w]);
    for bi in 0..b {
        for ci in 0..half {
            first.plane_mut(bi, ci).copy_from_slice(x.plane(bi, ci));
            second
                .plane_mut(bi, ci)
                .copy_from_slice(x.plane(bi, ci + half));
        }
    }
    Ok((first, second))
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ba, ca, ha, wa] = a.shape();
    let [bb, cb, hb, wb] = b.shape();
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor::zeros([ba, ca + cb, ha, wa]);
    for bi in 0..ba {
        for ci in 0..ca {
            out.plane_mut(bi, ci).copy_from_slice(a.plane(bi, ci));
        }
        for ci in 0..cb {
            out.plane_mut(bi, ca + ci).copy_from_slice(b.plane(bi, ci));
        }
    }
    Ok(out)
}
