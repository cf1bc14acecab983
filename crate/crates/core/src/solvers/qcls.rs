//! Least squares with every column of the unknown held inside a ball:
//!
//! ```text
//! min_W  ‖Rhs − W·Coeff‖²_F   s.t.  ‖W_{·j}‖₂ ≤ radius  for all j
//! ```
//!
//! The objective is kept in Gram form (`G = Coeff·Coeffᵀ`, `H = Rhs·Coeffᵀ`)
//! so that iterations cost `O(rows·cols²)` regardless of the sample count.
//! Solved by monotone accelerated projected gradient; the feasible set is a
//! product of balls, so projection is a per-column rescale.

use crate::data::DenseMatrix;
use crate::error::{Error, Result};

use super::sym_max_eigenvalue;

#[derive(Debug, Clone)]
pub struct QclsProblem {
    gram: DenseMatrix,
    cross: DenseMatrix,
    offset: f64,
    radius: f64,
}

#[derive(Debug, Clone)]
pub struct QclsOutcome {
    pub solution: DenseMatrix,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub kkt_residual: f64,
}

impl QclsProblem {
    /// `rhs` is `r × n`, `coeff` is `c × n`; the unknown is `r × c`.
    pub fn new(rhs: &DenseMatrix, coeff: &DenseMatrix, radius: f64) -> Result<Self> {
        if rhs.ncols() != coeff.ncols() {
            return Err(Error::Shape(format!(
                "rhs has {} samples, coefficients {}",
                rhs.ncols(),
                coeff.ncols()
            )));
        }
        Self::from_gram(
            coeff * coeff.transpose(),
            rhs * coeff.transpose(),
            rhs.norm_squared(),
            radius,
        )
    }

    /// Builds the problem `offset − 2⟨W, cross⟩ + tr(W·gram·Wᵀ)` directly.
    pub fn from_gram(gram: DenseMatrix, cross: DenseMatrix, offset: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Config(format!("radius {radius} must be positive")));
        }
        if gram.nrows() != gram.ncols() || gram.nrows() != cross.ncols() {
            return Err(Error::Shape(format!(
                "gram is {}×{}, cross term {}×{}",
                gram.nrows(),
                gram.ncols(),
                cross.nrows(),
                cross.ncols()
            )));
        }
        Ok(QclsProblem {
            gram,
            cross,
            offset,
            radius,
        })
    }

    pub fn solution_shape(&self) -> (usize, usize) {
        (self.cross.nrows(), self.cross.ncols())
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn gradient(&self, w: &DenseMatrix) -> DenseMatrix {
        self.gradient_from_product(&(w * &self.gram))
    }

    /// Gradient given the product `W·G`.
    fn gradient_from_product(&self, wg: &DenseMatrix) -> DenseMatrix {
        (wg - &self.cross) * 2.0
    }

    /// Objective given `W` and the product `W·G`.
    fn objective_from_product(&self, w: &DenseMatrix, wg: &DenseMatrix) -> f64 {
        self.offset - 2.0 * w.dot(&self.cross) + wg.dot(w)
    }
}

pub fn qcls_objective(p: &QclsProblem, w: &DenseMatrix) -> f64 {
    p.objective_from_product(w, &(w * &p.gram))
}

/// Scales every column with norm above `radius` back onto the sphere.
pub fn project_columns(w: &mut DenseMatrix, radius: f64) {
    for mut col in w.column_iter_mut() {
        let norm = col.norm();
        if norm > radius {
            col *= radius / norm;
        }
    }
}

/// Stationarity residual of the Lagrangian with one multiplier per column:
/// `max_j ‖g_j + 2ν_j·w_j‖` with `ν_j ≥ 0` chosen optimally for columns on the
/// boundary and `ν_j = 0` for interior columns.
pub fn qcls_kkt_residual(p: &QclsProblem, w: &DenseMatrix) -> f64 {
    kkt_from_gradient(p, w, &p.gradient(w))
}

fn kkt_from_gradient(p: &QclsProblem, w: &DenseMatrix, grad: &DenseMatrix) -> f64 {
    let boundary = p.radius * p.radius * (1.0 - 1e-7);
    grad.column_iter()
        .zip(w.column_iter())
        .map(|(g, x)| {
            let norm_sq = x.norm_squared();
            let nu = if norm_sq >= boundary {
                (-g.dot(&x) / (2.0 * norm_sq)).max(0.0)
            } else {
                0.0
            };
            (g + x * (2.0 * nu)).norm()
        })
        .fold(0.0, f64::max)
}

/// Accelerated projected gradient. Products with the Gram matrix are
/// carried along with the iterates (the extrapolation is linear), so each
/// iteration costs one product unless the step size backtracks.
pub fn solve_qcls(
    p: &QclsProblem,
    init: &DenseMatrix,
    max_iter: usize,
    tol: f64,
) -> Result<QclsOutcome> {
    if init.shape() != p.solution_shape() {
        return Err(Error::Shape(format!(
            "initial point is {}×{}, expected {:?}",
            init.nrows(),
            init.ncols(),
            p.solution_shape()
        )));
    }
    let mut x = init.clone();
    project_columns(&mut x, p.radius);
    let mut xg = &x * &p.gram;
    let mut fx = p.objective_from_product(&x, &xg);
    if !fx.is_finite() {
        return Err(Error::NonFiniteIterate("qcls"));
    }

    let mut lipschitz = 2.0 * sym_max_eigenvalue(&p.gram);
    if lipschitz <= 0.0 {
        lipschitz = 1.0;
    }

    let mut trace = Vec::new();
    let mut kkt = kkt_from_gradient(p, &x, &p.gradient_from_product(&xg));
    let mut iterations = 0;
    let mut y = x.clone();
    let mut yg = xg.clone();
    let mut momentum = 1.0_f64;

    while kkt > tol && iterations < max_iter {
        iterations += 1;
        let grad = p.gradient_from_product(&yg);
        let fy = p.objective_from_product(&y, &yg);
        let (z, zg, fz) = loop {
            let mut z = &y - &grad * (1.0 / lipschitz);
            project_columns(&mut z, p.radius);
            let zg = &z * &p.gram;
            let fz = p.objective_from_product(&z, &zg);
            let diff = &z - &y;
            let bound = fy + grad.dot(&diff) + 0.5 * lipschitz * diff.norm_squared();
            if fz <= bound + 1e-12 * (1.0 + fy.abs()) {
                break (z, zg, fz);
            }
            lipschitz *= 2.0;
            if !lipschitz.is_finite() {
                return Err(Error::NonFiniteIterate("qcls step size"));
            }
        };
        if !fz.is_finite() {
            return Err(Error::NonFiniteIterate("qcls"));
        }
        let (x_next, xg_next) = if fz <= fx {
            fx = fz;
            (z.clone(), zg.clone())
        } else {
            (x.clone(), xg.clone())
        };
        let momentum_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let toward_z = momentum / momentum_next;
        let inertia = (momentum - 1.0) / momentum_next;
        y = &x_next + (&z - &x_next) * toward_z + (&x_next - &x) * inertia;
        yg = &xg_next + (&zg - &xg_next) * toward_z + (&xg_next - &xg) * inertia;
        x = x_next;
        xg = xg_next;
        momentum = momentum_next;
        trace.push(fx);
        kkt = kkt_from_gradient(p, &x, &p.gradient_from_product(&xg));
    }

    Ok(QclsOutcome {
        solution: x,
        iterations,
        objective_trace: trace,
        kkt_residual: kkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Plain projected gradient with a fixed conservative step, run long.
    fn projected_gradient_oracle(rhs: &DenseMatrix, coeff: &DenseMatrix, iters: usize) -> DenseMatrix {
        let g = coeff * coeff.transpose();
        let h = rhs * coeff.transpose();
        let l = 2.0 * g.clone().symmetric_eigenvalues().amax();
        let mut w = DenseMatrix::zeros(rhs.nrows(), coeff.nrows());
        for _ in 0..iters {
            let grad = (&w * &g - &h) * 2.0;
            w -= grad / l;
            project_columns(&mut w, 1.0);
        }
        w
    }

    #[test]
    fn interior_optimum_is_returned() {
        // Y = 0.5·U with one column: fitting U on Y gives 0.5, feasible.
        let coeff = DenseMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let rhs = &coeff * 0.5;
        let p = QclsProblem::new(&rhs, &coeff, 1.0).unwrap();
        let out = solve_qcls(&p, &DenseMatrix::zeros(1, 1), 200, 1e-12).unwrap();
        assert!((out.solution[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn one_dimensional_boundary() {
        // min (y − u·s)² with unconstrained optimum u = −3.
        let coeff = DenseMatrix::from_row_slice(1, 1, &[1.0]);
        let rhs = DenseMatrix::from_row_slice(1, 1, &[-3.0]);
        let p = QclsProblem::new(&rhs, &coeff, 1.0).unwrap();
        let out = solve_qcls(&p, &DenseMatrix::zeros(1, 1), 200, 1e-10).unwrap();
        assert!((out.solution[0] + 1.0).abs() < 1e-12);
        assert!(out.kkt_residual < 1e-10);
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let coeff = random(&mut rng, 6, 20);
            let rhs = random(&mut rng, 4, 20) * 3.0;
            let p = QclsProblem::new(&rhs, &coeff, 1.0).unwrap();
            let out = solve_qcls(&p, &DenseMatrix::zeros(4, 6), 5000, 1e-10).unwrap();
            let oracle = projected_gradient_oracle(&rhs, &coeff, 200_000);
            let ours = qcls_objective(&p, &out.solution);
            let theirs = qcls_objective(&p, &oracle);
            assert!((ours - theirs).abs() < 1e-6, "{ours} vs {theirs}");
            assert!(out.kkt_residual < 1e-10);
            let direct = (&rhs - &out.solution * &coeff).norm_squared();
            assert!((direct - ours).abs() < 1e-9 * (1.0 + direct));
        }
    }

    #[test]
    fn output_always_feasible_and_no_worse_than_projected_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let coeff = random(&mut rng, 5, 12);
            let rhs = random(&mut rng, 3, 12) * 5.0;
            let init = random(&mut rng, 3, 5) * 4.0;
            let p = QclsProblem::new(&rhs, &coeff, 1.0).unwrap();
            let mut projected = init.clone();
            project_columns(&mut projected, 1.0);
            let out = solve_qcls(&p, &init, 30, 0.0).unwrap();
            for col in out.solution.column_iter() {
                assert!(col.norm_squared() <= 1.0 + 1e-9);
            }
            assert!(qcls_objective(&p, &out.solution) <= qcls_objective(&p, &projected) + 1e-12);
            for w in out.objective_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }
}
