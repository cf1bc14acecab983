//! L1-regularized least squares, column by column:
//!
//! ```text
//! min_S  ‖T − A·S‖²_F + w·|S|₁
//! ```
//!
//! solved with monotone FISTA (accelerated proximal gradient where each
//! column only accepts the prox step when it does not increase that
//! column's objective) and a backtracking Lipschitz estimate.

use crate::data::DenseMatrix;
use crate::error::{Error, Result};

use super::spectral_norm_sq;

#[derive(Debug, Clone, Copy)]
pub struct LassoProblem<'a> {
    /// `d × b`
    pub design: &'a DenseMatrix,
    /// `d × n`
    pub targets: &'a DenseMatrix,
    pub l1_weight: f64,
}

#[derive(Debug, Clone)]
pub struct LassoOutcome {
    pub solution: DenseMatrix,
    pub iterations: usize,
    /// Total objective after every iteration (non-increasing).
    pub objective_trace: Vec<f64>,
    /// Max-norm violation of the subgradient optimality condition at exit.
    pub optimality_violation: f64,
}

impl LassoProblem<'_> {
    fn validate(&self, init: &DenseMatrix) -> Result<()> {
        if !(self.l1_weight >= 0.0) || !self.l1_weight.is_finite() {
            return Err(Error::Config(format!("l1 weight {} must be ≥ 0", self.l1_weight)));
        }
        if self.design.nrows() != self.targets.nrows() {
            return Err(Error::Shape(format!(
                "design has {} rows, targets {}",
                self.design.nrows(),
                self.targets.nrows()
            )));
        }
        if init.shape() != (self.design.ncols(), self.targets.ncols()) {
            return Err(Error::Shape(format!(
                "initial solution is {}×{}, expected {}×{}",
                init.nrows(),
                init.ncols(),
                self.design.ncols(),
                self.targets.ncols()
            )));
        }
        Ok(())
    }
}

fn column_objectives(
    targets: &DenseMatrix,
    fitted: &DenseMatrix,
    s: &DenseMatrix,
    w: f64,
) -> Vec<f64> {
    (0..s.ncols())
        .map(|j| {
            let r = targets.column(j) - fitted.column(j);
            r.norm_squared() + w * s.column(j).lp_norm(1)
        })
        .collect()
}

pub fn lasso_objective(p: &LassoProblem<'_>, s: &DenseMatrix) -> f64 {
    let fitted = p.design * s;
    (p.targets - fitted).norm_squared() + p.l1_weight * s.lp_norm(1)
}

/// Largest violation of the L1 optimality conditions, where `g` is the
/// gradient of the smooth part: `|g| ≤ w` at zero entries and
/// `g + w·sign(s) = 0` elsewhere.
pub fn lasso_optimality_violation(p: &LassoProblem<'_>, s: &DenseMatrix) -> f64 {
    let grad = p.design.transpose() * (p.design * s - p.targets) * 2.0;
    violation(&grad, s, p.l1_weight)
}

fn violation(grad: &DenseMatrix, s: &DenseMatrix, w: f64) -> f64 {
    grad.iter()
        .zip(s.iter())
        .map(|(&g, &x)| {
            if x == 0.0 {
                (g.abs() - w).max(0.0)
            } else {
                (g + w * x.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub fn solve_lasso(
    p: &LassoProblem<'_>,
    init: &DenseMatrix,
    max_iter: usize,
    tol: f64,
) -> Result<LassoOutcome> {
    p.validate(init)?;
    let a = p.design;
    let t = p.targets;
    let w = p.l1_weight;
    let at = a.transpose();

    let mut lipschitz = 2.0 * spectral_norm_sq(a);
    if lipschitz <= 0.0 {
        lipschitz = 1.0;
    }

    let mut x = init.clone();
    let mut ax = a * &x;
    let mut fx = column_objectives(t, &ax, &x, w);
    let mut y = x.clone();
    let mut ay = ax.clone();
    let mut momentum = 1.0_f64;
    let mut trace = Vec::with_capacity(max_iter);
    let mut iterations = 0;

    let mut current_violation = {
        let grad = &at * (&ax - t) * 2.0;
        violation(&grad, &x, w)
    };
    if current_violation <= tol {
        return Ok(LassoOutcome {
            solution: x,
            iterations: 0,
            objective_trace: trace,
            optimality_violation: current_violation,
        });
    }

    while iterations < max_iter {
        iterations += 1;
        let residual_y = &ay - t;
        let grad = &at * &residual_y * 2.0;
        let smooth_y = residual_y.norm_squared();

        let (z, az) = loop {
            let step = 1.0 / lipschitz;
            let z = (&y - &grad * step).map(|v| soft_threshold(v, w * step));
            let az = a * &z;
            let diff = &z - &y;
            let smooth_z = (&az - t).norm_squared();
            let bound = smooth_y + grad.dot(&diff) + 0.5 * lipschitz * diff.norm_squared();
            if smooth_z <= bound + 1e-12 * (1.0 + smooth_y.abs()) {
                break (z, az);
            }
            lipschitz *= 2.0;
            if !lipschitz.is_finite() {
                return Err(Error::NonFiniteIterate("lasso step size"));
            }
        };

        let fz = column_objectives(t, &az, &z, w);
        let mut x_next = x.clone();
        let mut ax_next = ax.clone();
        for j in 0..x.ncols() {
            if !fz[j].is_finite() {
                return Err(Error::NonFiniteIterate("lasso"));
            }
            if fz[j] <= fx[j] {
                x_next.set_column(j, &z.column(j));
                ax_next.set_column(j, &az.column(j));
                fx[j] = fz[j];
            }
        }

        let momentum_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let toward_z = momentum / momentum_next;
        let inertia = (momentum - 1.0) / momentum_next;
        y = &x_next + (&z - &x_next) * toward_z + (&x_next - &x) * inertia;
        ay = &ax_next + (&az - &ax_next) * toward_z + (&ax_next - &ax) * inertia;
        x = x_next;
        ax = ax_next;
        momentum = momentum_next;
        trace.push(fx.iter().sum());

        if iterations % 5 == 0 || iterations == max_iter {
            let grad_x = &at * (&ax - t) * 2.0;
            current_violation = violation(&grad_x, &x, w);
            if current_violation <= tol {
                break;
            }
        }
    }

    Ok(LassoOutcome {
        solution: x,
        iterations,
        objective_trace: trace,
        optimality_violation: current_violation,
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

    /// Cyclic coordinate descent on one column, run to convergence.
    fn coordinate_descent(a: &DenseMatrix, t: &[f64], w: f64) -> Vec<f64> {
        let (d, b) = a.shape();
        let mut s = vec![0.0; b];
        let mut r: Vec<f64> = t.to_vec();
        for _ in 0..20_000 {
            let mut max_change = 0.0_f64;
            for j in 0..b {
                let col_sq: f64 = (0..d).map(|i| a[(i, j)] * a[(i, j)]).sum();
                if col_sq == 0.0 {
                    continue;
                }
                let rho: f64 = (0..d).map(|i| a[(i, j)] * (r[i] + a[(i, j)] * s[j])).sum();
                // minimize col_sq·x² − 2ρx + w|x|
                let new = soft_threshold(rho, w / 2.0) / col_sq;
                let delta = new - s[j];
                if delta != 0.0 {
                    for i in 0..d {
                        r[i] -= a[(i, j)] * delta;
                    }
                    s[j] = new;
                }
                max_change = max_change.max(delta.abs());
            }
            if max_change < 1e-15 {
                break;
            }
        }
        s
    }

    #[test]
    fn identity_design_soft_thresholds() {
        let a = DenseMatrix::identity(2, 2);
        let t = DenseMatrix::from_column_slice(2, 1, &[3.0, 0.0]);
        let p = LassoProblem {
            design: &a,
            targets: &t,
            l1_weight: 1.0,
        };
        let out = solve_lasso(&p, &DenseMatrix::zeros(2, 1), 200, 1e-12).unwrap();
        assert!((out.solution[0] - 2.5).abs() < 1e-10);
        assert_eq!(out.solution[1], 0.0);
    }

    #[test]
    fn zero_weight_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 6, 3);
        let t = random(&mut rng, 6, 2);
        let p = LassoProblem {
            design: &a,
            targets: &t,
            l1_weight: 0.0,
        };
        let out = solve_lasso(&p, &DenseMatrix::zeros(3, 2), 5000, 1e-10).unwrap();
        let grad = a.transpose() * (&a * &out.solution - &t);
        assert!(grad.amax() < 1e-9, "residual gradient {}", grad.amax());
    }

    #[test]
    fn matches_coordinate_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = random(&mut rng, 5, 8);
            let t = random(&mut rng, 5, 3);
            let p = LassoProblem {
                design: &a,
                targets: &t,
                l1_weight: 0.3,
            };
            let out = solve_lasso(&p, &DenseMatrix::zeros(8, 3), 20_000, 1e-11).unwrap();
            let mut oracle = DenseMatrix::zeros(8, 3);
            for j in 0..3 {
                let col: Vec<f64> = t.column(j).iter().copied().collect();
                let s = coordinate_descent(&a, &col, 0.3);
                oracle.set_column(j, &nalgebra::DVector::from_vec(s));
            }
            let ours = lasso_objective(&p, &out.solution);
            let theirs = lasso_objective(&p, &oracle);
            assert!(ours <= theirs + 1e-8, "fista {ours} vs cd {theirs}");
            assert!(lasso_optimality_violation(&p, &out.solution) < 1e-6);
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 10, 30);
        let t = random(&mut rng, 10, 7);
        let p = LassoProblem {
            design: &a,
            targets: &t,
            l1_weight: 0.05,
        };
        let init = random(&mut rng, 30, 7);
        let start = lasso_objective(&p, &init);
        let out = solve_lasso(&p, &init, 300, 0.0).unwrap();
        let mut prev = start;
        for &v in &out.objective_trace {
            assert!(v <= prev + 1e-12 * (1.0 + prev), "{v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn huge_weight_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 4, 6);
        let t = random(&mut rng, 4, 3);
        let p = LassoProblem {
            design: &a,
            targets: &t,
            l1_weight: 1e6,
        };
        let out = solve_lasso(&p, &random(&mut rng, 6, 3), 200, 1e-9).unwrap();
        assert!(out.solution.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = DenseMatrix::zeros(3, 2);
        let t = DenseMatrix::zeros(4, 1);
        let p = LassoProblem {
            design: &a,
            targets: &t,
            l1_weight: 0.1,
        };
        assert!(matches!(
            solve_lasso(&p, &DenseMatrix::zeros(2, 1), 10, 1e-6),
            Err(Error::Shape(_))
        ));
    }
}
