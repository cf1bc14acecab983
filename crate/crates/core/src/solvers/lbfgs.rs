//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! The search direction comes from the standard two-loop recursion over the
//! last `memory` curvature pairs. Curvature pairs with `sᵀy ≤ 0` are
//! skipped so the implicit inverse Hessian stays positive definite.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor per rejected trial.
    pub backtrack: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 8,
            max_iterations: 50,
            grad_tolerance: 1e-6,
            armijo: 1e-4,
            backtrack: 0.5,
            max_line_search_steps: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Config("L-BFGS memory must be ≥ 1".into()));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::Config("L-BFGS gradient tolerance must be > 0".into()));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config("Armijo constant must lie in (0, 1)".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config("backtracking factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    /// No step along the search direction gave sufficient decrease. The
    /// returned point is the last accepted iterate.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(grad: &[f64], history: &VecDeque<CurvaturePair>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some(last) = history.back() {
        let scale = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for (pair, alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (alpha - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub fn minimize_lbfgs<F>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = f(&x, &mut grad);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteIterate("L-BFGS starting point"));
    }

    let mut history: VecDeque<CurvaturePair> = VecDeque::with_capacity(cfg.memory);
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut iterations = 0;

    loop {
        let gnorm = norm(&grad);
        if gnorm <= cfg.grad_tolerance {
            return Ok(LbfgsOutcome {
                x,
                value,
                gradient_norm: gnorm,
                iterations,
                status: LbfgsStatus::Converged,
            });
        }
        if iterations >= cfg.max_iterations {
            return Ok(LbfgsOutcome {
                x,
                value,
                gradient_norm: gnorm,
                iterations,
                status: LbfgsStatus::MaxIterations,
            });
        }

        let mut direction = two_loop(&grad, &history);
        let mut slope = dot(&grad, &direction);
        if !(slope < 0.0) {
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if history.is_empty() { 1.0 / gnorm } else { 1.0 };

        let mut accepted = None;
        for _ in 0..cfg.max_line_search_steps {
            for i in 0..n {
                trial[i] = x[i] + step * direction[i];
            }
            let trial_value = f(&trial, &mut trial_grad);
            if trial_value.is_finite()
                && trial_grad.iter().all(|g| g.is_finite())
                && trial_value <= value + cfg.armijo * step * slope
            {
                accepted = Some(trial_value);
                break;
            }
            step *= cfg.backtrack;
        }

        let Some(new_value) = accepted else {
            return Ok(LbfgsOutcome {
                x,
                value,
                gradient_norm: gnorm,
                iterations,
                status: LbfgsStatus::LineSearchFailed,
            });
        };

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        value = new_value;
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    /// Fixed-step gradient descent run for a very long time; slow but
    /// obviously correct.
    fn gradient_descent_oracle(x0: [f64; 2], iters: usize) -> [f64; 2] {
        let mut x = x0;
        let mut g = [0.0; 2];
        for _ in 0..iters {
            rosenbrock(&x, &mut g);
            x[0] -= 1e-3 * g[0];
            x[1] -= 1e-3 * g[1];
        }
        x
    }

    #[test]
    fn quadratic_bowl() {
        let out = minimize_lbfgs(
            |x, g| {
                g.iter_mut().zip(x).for_each(|(gi, xi)| *gi = 2.0 * xi);
                x.iter().map(|v| v * v).sum()
            },
            vec![1.0, 1.0],
            &LbfgsConfig {
                grad_tolerance: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.status, LbfgsStatus::Converged);
        assert!(out.x.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let cfg = LbfgsConfig {
            max_iterations: 2000,
            grad_tolerance: 1e-10,
            ..Default::default()
        };
        let out = minimize_lbfgs(rosenbrock, vec![-1.2, 1.0], &cfg).unwrap();
        let oracle = gradient_descent_oracle([-1.2, 1.0], 2_000_000);
        assert!((oracle[0] - 1.0).abs() < 1e-5 && (oracle[1] - 1.0).abs() < 1e-5);
        assert!((out.x[0] - oracle[0]).abs() < 1e-5, "{:?}", out.x);
        assert!((out.x[1] - oracle[1]).abs() < 1e-5, "{:?}", out.x);
    }

    #[test]
    fn never_worse_than_start() {
        let out = minimize_lbfgs(rosenbrock, vec![0.3, -2.0], &LbfgsConfig::default()).unwrap();
        let mut g = [0.0; 2];
        assert!(out.value <= rosenbrock(&[0.3, -2.0], &mut g));
    }

    #[test]
    fn inconsistent_gradient_fails_line_search_not_convergence() {
        // Gradient points uphill: no step along −g can decrease f.
        let out = minimize_lbfgs(
            |x, g| {
                g[0] = -2.0 * x[0];
                x[0] * x[0]
            },
            vec![1.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(out.status, LbfgsStatus::LineSearchFailed);
        assert_eq!(out.x, vec![1.0]);
    }

    #[test]
    fn rejects_zero_memory() {
        let cfg = LbfgsConfig {
            memory: 0,
            ..Default::default()
        };
        assert!(minimize_lbfgs(|_, _| 0.0, vec![0.0], &cfg).is_err());
    }
}
