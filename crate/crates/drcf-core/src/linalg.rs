//! Symmetric positive-definite solves with the empty-cell / ridge
//! policy, plus eigenvalue utilities for whitening and diagnostics.
//!
//! Policy for solving G d = r with G a sample Gram matrix:
//! 1. indices whose diagonal is exactly zero carry no data and are
//!    dropped (their solution entries are zero, reported in the meta);
//! 2. Cholesky on the remaining submatrix;
//! 3. if the factorization fails, retry once with a ridge of
//!    1e-10 * trace/k added to the active diagonal.

use alloc::{format, vec::Vec};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::mathx;

/// What the policy did to produce a solution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveMeta {
    /// Basis indices excluded because their Gram diagonal was zero.
    pub dropped: Vec<usize>,
    /// Ridge added to the active diagonal; 0.0 when unused.
    pub ridge: f64,
    /// Number of active (retained) indices.
    pub rank: usize,
}

/// Reusable SPD factorization under the drop/ridge policy.
pub struct SpdSolver {
    chol: Cholesky<f64, Dyn>,
    active: Vec<usize>,
    size: usize,
    pub meta: SolveMeta,
}

impl SpdSolver {
    pub fn new(g: &DMatrix<f64>) -> Result<Self> {
        let k = g.nrows();
        if k == 0 || g.ncols() != k {
            return Err(Error::Validation(format!(
                "SPD solver needs a square nonempty matrix, got {}x{}",
                g.nrows(),
                g.ncols()
            )));
        }
        let active: Vec<usize> = (0..k).filter(|&i| g[(i, i)] > 0.0).collect();
        if active.is_empty() {
            return Err(Error::Numeric(
                "Gram matrix is identically zero; no data reached any basis function".into(),
            ));
        }
        let dropped: Vec<usize> = (0..k).filter(|&i| g[(i, i)] <= 0.0).collect();
        let m = active.len();
        let mut sub = DMatrix::zeros(m, m);
        for (ri, &i) in active.iter().enumerate() {
            for (rj, &j) in active.iter().enumerate() {
                sub[(ri, rj)] = g[(i, j)];
            }
        }
        let mut ridge = 0.0;
        let chol = match Cholesky::new(sub.clone()) {
            Some(c) => c,
            None => {
                ridge = 1e-10 * sub.trace() / m as f64;
                for i in 0..m {
                    sub[(i, i)] += ridge;
                }
                Cholesky::new(sub).ok_or_else(|| {
                    Error::Numeric(format!(
                        "Gram factorization failed even with ridge {ridge:.3e}"
                    ))
                })?
            }
        };
        Ok(SpdSolver {
            chol,
            active,
            size: k,
            meta: SolveMeta {
                dropped,
                ridge,
                rank: m,
            },
        })
    }

    /// Solve G d = rhs, with zeros at dropped indices.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut sub = DVector::zeros(self.active.len());
        for (ri, &i) in self.active.iter().enumerate() {
            sub[ri] = rhs[i];
        }
        let sol = self.chol.solve(&sub);
        let mut out = DVector::zeros(self.size);
        for (ri, &i) in self.active.iter().enumerate() {
            out[i] = sol[ri];
        }
        out
    }
}

/// One-shot policy solve.
pub fn solve_spd_policy(g: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, SolveMeta)> {
    let solver = SpdSolver::new(g)?;
    let sol = solver.solve(rhs);
    let meta = solver.meta;
    Ok((sol, meta))
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_range(g: &DMatrix<f64>) -> (f64, f64) {
    let eig = g.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    (lo, hi)
}

/// Symmetric inverse square root: W = V diag(1/sqrt(lambda)) V^T, so
/// W G W^T = I. Rejects eigenvalues at or below `rel_tol * lambda_max`,
/// naming the offending one.
pub fn sym_inv_sqrt(g: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let eig = g.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let floor = rel_tol * lambda_max.max(f64::MIN_POSITIVE);
    let k = g.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= floor {
            return Err(Error::Numeric(format!(
                "whitening reference is rank-deficient: eigenvalue {idx} = {lam:.6e} \
                 (threshold {floor:.6e})"
            )));
        }
        let s = 1.0 / mathx::sqrt(lam);
        for r in 0..k {
            scaled[(r, idx)] *= s;
        }
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}
