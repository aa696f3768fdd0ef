//! Shared oracles for the integration tests. Everything here is independent
//! of the library's fast paths: dense matrices are built entry-by-entry from
//! stencil indices, eigenvalues come from cyclic Jacobi rotations, and linear
//! systems go through a plain pivoted elimination.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use pdenet_core::conv::ConvBlock;
use pdenet_core::tensor::Tensor;

/// Dense matrix of the zero-padded correlation defined by a ConvBlock on
/// (c_in, h, w) inputs, built directly from index arithmetic:
/// `M[(o,y,x), (i,yy,xx)] = w[o,i,dy,dx]` with `yy = y+dy-p`, `xx = x+dx-p`.
pub fn conv_dense_matrix(k: &ConvBlock, h: usize, w: usize) -> Vec<Vec<f64>> {
    let (ci, co, ks) = (k.c_in(), k.c_out(), k.kernel());
    let p = ks / 2;
    let rows = co * h * w;
    let cols = ci * h * w;
    let mut m = vec![vec![0.0; cols]; rows];
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let row = (o * h + y) * w + x;
                for i in 0..ci {
                    for dy in 0..ks {
                        for dx in 0..ks {
                            let yy = y as isize + dy as isize - p as isize;
                            let xx = x as isize + dx as isize - p as isize;
                            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let col = (i * h + yy as usize) * w + xx as usize;
                            let widx = ((o * ci + i) * ks + dy) * ks + dx;
                            m[row][col] = k.weights()[widx];
                        }
                    }
                }
            }
        }
    }
    m
}

pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn mat_transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (r, c) = (m.len(), m[0].len());
    let mut t = vec![vec![0.0; r]; c];
    for i in 0..r {
        for j in 0..c {
            t[j][i] = m[i][j];
        }
    }
    t
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for l in 0..k {
            let av = a[i][l];
            for j in 0..m {
                c[i][j] += av * b[l][j];
            }
        }
    }
    c
}

/// Flattens a (1, c, h, w) tensor into the dense-matrix vector ordering.
pub fn flatten_single(t: &Tensor) -> Vec<f64> {
    assert_eq!(t.batch(), 1);
    t.data().to_vec()
}

pub fn unflatten_single(v: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec([1, c, h, w], v.to_vec()).unwrap()
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = a.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        b.swap(col, piv);
        assert!(a[col][col].abs() > 1e-300, "singular oracle system");
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for j in col..n {
                let v = a[col][j];
                a[r][j] -= f * v;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in col + 1..n {
            s -= a[col][j] * x[j];
        }
        x[col] = s / a[col][col];
    }
    x
}

/// Relative gap between two scalars with an absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Max-norm relative difference between two equal-length slices.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
        / scale
}

/// Relative Frobenius distance between tensors.
pub fn tensor_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    diff / (b.frobenius_norm() + 1e-12)
}
