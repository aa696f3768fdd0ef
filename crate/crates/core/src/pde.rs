//! The coordinate change between convolution stencils and differential
//! operator coefficients.
//!
//! In 1D a 3-tap stencil `theta` decomposes uniquely into reaction,
//! convection, and diffusion parts on a mesh of width `h`:
//!
//! ```text
//! theta = (b1/4)[1 2 1] + (b2/2h)[-1 0 1] + (b3/h^2)[-1 2 -1]
//! ```
//!
//! The 3x3 system is non-singular for every `h > 0`. The 2D map between a 3x3
//! stencil and nine operator coefficients (1, dx, dy, dxx, dyy, dxdy, dxxdy,
//! dxdyy, dxxdyy) is constructed as the tensor product of the 1D map with
//! itself: every basis operator's stencil is the outer product of the
//! corresponding 1D columns along y and x. This separable construction is a
//! derivation (only the nine operators are given, not the 9x9 matrix) and
//! reproduces the listed operators.

use crate::error::{Error, Result};

/// Reaction, convection, diffusion coefficients of a 1D 3-tap stencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeCoeffs1D {
    /// (reaction, convection, diffusion)
    pub beta: [f64; 3],
    pub h: f64,
}

/// Coefficients of the nine separable 2D operators, in the order
/// 1, dx, dy, dx^2, dy^2, dx dy, dx^2 dy, dx dy^2, dx^2 dy^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeCoeffs2D {
    pub beta: [f64; 9],
    pub h: f64,
}

/// (x-derivative order, y-derivative order) for each 2D coefficient index.
pub const OPERATOR_ORDERS_2D: [(usize, usize); 9] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (2, 0),
    (0, 2),
    (1, 1),
    (2, 1),
    (1, 2),
    (2, 2),
];

/// Human-readable names matching [`OPERATOR_ORDERS_2D`].
pub const OPERATOR_NAMES_2D: [&str; 9] = [
    "1", "dx", "dy", "dx^2", "dy^2", "dx*dy", "dx^2*dy", "dx*dy^2", "dx^2*dy^2",
];

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("mesh width h must be positive, got {h}")));
    }
    Ok(())
}

/// The 3x3 matrix M(h) with M(h) * beta = theta. Column j is the stencil of
/// the j-th basis operator (reaction, convection, diffusion).
pub fn coordinate_matrix_1d(h: f64) -> [[f64; 3]; 3] {
    [
        [0.25, -1.0 / (2.0 * h), -1.0 / (h * h)],
        [0.5, 0.0, 2.0 / (h * h)],
        [0.25, 1.0 / (2.0 * h), -1.0 / (h * h)],
    ]
}

pub fn beta_to_theta_1d(c: &PdeCoeffs1D) -> Result<[f64; 3]> {
    check_h(c.h)?;
    let m = coordinate_matrix_1d(c.h);
    let mut theta = [0.0; 3];
    for (row, t) in theta.iter_mut().enumerate() {
        *t = m[row][0] * c.beta[0] + m[row][1] * c.beta[1] + m[row][2] * c.beta[2];
    }
    Ok(theta)
}

/// Solves the 3x3 system in closed form; exact inverse of [`beta_to_theta_1d`].
pub fn theta_to_beta_1d(theta: [f64; 3], h: f64) -> Result<PdeCoeffs1D> {
    check_h(h)?;
    let [t0, t1, t2] = theta;
    let b1 = t0 + t1 + t2;
    let b2 = h * (t2 - t0);
    let b3 = h * h * (t1 - t0 - t2) / 4.0;
    Ok(PdeCoeffs1D {
        beta: [b1, b2, b3],
        h,
    })
}

/// Stencil of the separable operator dx^a dy^b as the outer product of 1D
/// columns: `stencil[dy][dx] = My[dy][b] * Mx[dx][a]`. Row-major [dy][dx].
fn basis_stencil_2d(m: &[[f64; 3]; 3], a: usize, b: usize) -> [f64; 9] {
    let mut s = [0.0; 9];
    for dy in 0..3 {
        for dx in 0..3 {
            s[dy * 3 + dx] = m[dy][b] * m[dx][a];
        }
    }
    s
}

pub fn beta_to_theta_2d(c: &PdeCoeffs2D) -> Result<[f64; 9]> {
    check_h(c.h)?;
    let m = coordinate_matrix_1d(c.h);
    let mut theta = [0.0; 9];
    for (k, &(a, b)) in OPERATOR_ORDERS_2D.iter().enumerate() {
        let s = basis_stencil_2d(&m, a, b);
        for i in 0..9 {
            theta[i] += c.beta[k] * s[i];
        }
    }
    Ok(theta)
}

/// Inverse of [`beta_to_theta_2d`]: solves the 9x9 system by Gaussian
/// elimination with partial pivoting. Non-singular for every h > 0.
pub fn theta_to_beta_2d(theta: [f64; 9], h: f64) -> Result<PdeCoeffs2D> {
    check_h(h)?;
    let m = coordinate_matrix_1d(h);
    // Column k of the 9x9 system is the basis stencil of operator k.
    let mut a = [[0.0f64; 10]; 9];
    for (k, &(ax, by)) in OPERATOR_ORDERS_2D.iter().enumerate() {
        let s = basis_stencil_2d(&m, ax, by);
        for row in 0..9 {
            a[row][k] = s[row];
        }
    }
    for row in 0..9 {
        a[row][9] = theta[row];
    }
    // Forward elimination.
    for col in 0..9 {
        let mut pivot = col;
        for row in col + 1..9 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            // Cannot occur for h > 0; the separable construction is a
            // Kronecker product of non-singular factors.
            return Err(Error::invalid(format!(
                "singular 2D coordinate map at h = {h}"
            )));
        }
        a.swap(col, pivot);
        for row in col + 1..9 {
            let factor = a[row][col] / a[col][col];
            for j in col..10 {
                a[row][j] -= factor * a[col][j];
            }
        }
    }
    // Back substitution.
    let mut beta = [0.0f64; 9];
    for col in (0..9).rev() {
        let mut sum = a[col][9];
        for j in col + 1..9 {
            sum -= a[col][j] * beta[j];
        }
        beta[col] = sum / a[col][col];
    }
    Ok(PdeCoeffs2D { beta, h })
}
