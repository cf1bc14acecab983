//! Numerical building blocks used by the block updates: L1-regularized
//! least squares, least squares with unit-ball column constraints, and
//! limited-memory BFGS.

mod gradcheck;
mod lasso;
mod lbfgs;
mod qcls;

pub use gradcheck::{central_difference_gradient, gradient_relative_error};
pub use lasso::{
    lasso_objective, lasso_optimality_violation, solve_lasso, LassoOutcome, LassoProblem,
};
pub use lbfgs::{minimize_lbfgs, LbfgsConfig, LbfgsOutcome, LbfgsStatus};
pub use qcls::{
    project_columns, qcls_kkt_residual, qcls_objective, solve_qcls, QclsOutcome, QclsProblem,
};

use crate::data::DenseMatrix;

/// Largest eigenvalue of `AᵀA` (squared spectral norm of `A`), computed on
/// whichever Gram matrix is smaller.
pub(crate) fn spectral_norm_sq(a: &DenseMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let gram = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    sym_max_eigenvalue(&gram)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix. Small
/// matrices use a full eigendecomposition; larger ones use power iteration,
/// which can only underestimate, so callers keep a backtracking safeguard.
pub(crate) fn sym_max_eigenvalue(gram: &DenseMatrix) -> f64 {
    const EXACT_LIMIT: usize = 128;
    if gram.is_empty() {
        return 0.0;
    }
    if gram.nrows() <= EXACT_LIMIT {
        return gram
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(0.0_f64, f64::max);
    }
    let n = gram.nrows();
    let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..200 {
        let w = gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= 1e-10 * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Iteration caps and tolerances handed to every inner solve during
/// training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct SolverBudget {
    pub lasso_max_iter: usize,
    pub lasso_tol: f64,
    pub qcls_max_iter: usize,
    pub qcls_tol: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for SolverBudget {
    fn default() -> Self {
        SolverBudget {
            lasso_max_iter: 200,
            lasso_tol: 1e-6,
            qcls_max_iter: 200,
            qcls_tol: 1e-8,
            lbfgs: LbfgsConfig::default(),
        }
    }
}
