//! Small dense symmetric positive-definite helpers (Cholesky based).

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Cholesky factorization of a symmetric positive-definite matrix.
pub struct SpdFactor {
    llt: Llt<f64>,
}

impl SpdFactor {
    pub fn new(m: MatRef<'_, f64>, what: &str) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension {
                context: "spd factor",
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        let llt = m
            .llt(Side::Lower)
            .map_err(|_| Error::Numerical(format!("{what} is not positive definite")))?;
        Ok(Self { llt })
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn lower(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    pub fn logdet(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = self.llt.solve(&rhs);
        x.col_as_slice(0).to_vec()
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        self.llt.solve(b)
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }

    /// `L z`, mapping standard-normal noise to a draw with covariance `L Lᵀ`.
    pub fn lower_mul(&self, z: &[f64]) -> Vec<f64> {
        let l = self.llt.L();
        (0..l.nrows())
            .map(|i| (0..=i).map(|k| l[(i, k)] * z[k]).sum())
            .collect()
    }

    /// `L⁻ᵀ z`, mapping standard-normal noise to a draw with covariance `(L Lᵀ)⁻¹`.
    pub fn lower_transpose_solve(&self, z: &[f64]) -> Vec<f64> {
        let l = self.llt.L();
        let n = l.nrows();
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }
}

pub fn mat_vec(m: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
        .collect()
}

pub fn mat_t_vec(m: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).map(|i| m[(i, j)] * x[i]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ratio of the smallest to the largest eigenvalue of a symmetric matrix.
pub fn condition_ratio(m: MatRef<'_, f64>) -> Result<f64> {
    let ev = m
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigenvalues did not converge: {e:?}")))?;
    let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if max > 0.0 { min / max } else { f64::NEG_INFINITY })
}
