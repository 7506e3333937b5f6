//! Quasi-Newton maximisation with backtracking line search and a Newton finish.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{central_jacobian, max_abs, symmetrize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Converged when the gradient max-norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// BFGS phase stops when the relative objective gain of a step falls below this.
    pub rel_improvement: f64,
    /// Seed the inverse Hessian from a finite-difference Hessian at the start.
    pub hessian_start: bool,
    /// Newton steps allowed after the BFGS phase.
    pub polish_steps: usize,
    pub hessian_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            rel_improvement: 1e-10,
            hessian_start: true,
            polish_steps: 8,
            hessian_step: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    RelativeImprovement,
    IterationLimit,
    LineSearchFailed,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::GradientTolerance => "gradient tolerance reached",
            StopReason::RelativeImprovement => "relative improvement below threshold",
            StopReason::IterationLimit => "iteration limit reached",
            StopReason::LineSearchFailed => "line search failed",
        })
    }
}

#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
}

/// Objective returning (value, gradient). An error at a trial point counts as a failed step.
pub trait Objective {
    fn value_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Largest step length allowed along `direction` from `x`; the line search starts there when below 1.
    fn step_limit(&mut self, _x: &[f64], _direction: &[f64]) -> f64 {
        f64::INFINITY
    }
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Objective for F {
    fn value_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

fn finite(v: f64, g: &[f64]) -> bool {
    v.is_finite() && g.iter().all(|x| x.is_finite())
}

/// Finite-difference Hessian of the objective's analytic gradient, symmetrised.
pub fn hessian<O: Objective + ?Sized>(obj: &mut O, x: &[f64], step: f64) -> Result<Vec<Vec<f64>>> {
    let mut failure = None;
    let mut h = central_jacobian(x, step, |p| match obj.value_gradient(p) {
        Ok((_, g)) => g,
        Err(e) => {
            failure.get_or_insert(e);
            vec![f64::NAN; p.len()]
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    symmetrize(&mut h);
    if h.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Hessian entry".into()));
    }
    Ok(h)
}

fn to_matrix(h: &[Vec<f64>]) -> DMatrix<f64> {
    let n = h.len();
    DMatrix::from_fn(n, n, |i, j| h[i][j])
}

/// Inverse of the negated Hessian when it is positive definite.
fn inverse_negated(h: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let neg = -to_matrix(h);
    neg.cholesky().map(|c| c.inverse())
}

struct LineResult {
    x: Vec<f64>,
    value: f64,
    gradient: Vec<f64>,
}

fn backtrack<O: Objective + ?Sized>(obj: &mut O, x: &[f64], value: f64, direction: &DVector<f64>, slope: f64) -> Option<LineResult> {
    let limit = obj.step_limit(x, direction.as_slice());
    let mut t = if limit > 0.0 && limit < 1.0 { limit } else { 1.0 };
    for _ in 0..60 {
        let trial: Vec<f64> = x.iter().zip(direction.iter()).map(|(a, d)| a + t * d).collect();
        if let Ok((v, g)) = obj.value_gradient(&trial) {
            if finite(v, &g) && v >= value + 1e-4 * t * slope {
                return Some(LineResult {
                    x: trial,
                    value: v,
                    gradient: g,
                });
            }
        }
        t *= 0.5;
    }
    None
}

/// A full Newton step whose value gain is lost in rounding is still taken when it
/// shrinks the gradient, since Armijo cannot see progress below the value's resolution.
fn newton_at_roundoff<O: Objective + ?Sized>(
    obj: &mut O,
    x: &[f64],
    value: f64,
    grad: &[f64],
    direction: &DVector<f64>,
) -> Option<LineResult> {
    if obj.step_limit(x, direction.as_slice()) < 1.0 {
        return None;
    }
    let trial: Vec<f64> = x.iter().zip(direction.iter()).map(|(a, d)| a + d).collect();
    let (v, g) = obj.value_gradient(&trial).ok()?;
    let resolution = 64.0 * f64::EPSILON * value.abs().max(1.0);
    (finite(v, &g) && v >= value - resolution && max_abs(&g) < max_abs(grad)).then_some(LineResult {
        x: trial,
        value: v,
        gradient: g,
    })
}

/// Maximises the objective from `x0`.
pub fn maximize<O: Objective + ?Sized>(obj: &mut O, x0: &[f64], opts: &OptimOptions) -> Result<OptimOutcome> {
    let n = x0.len();
    let (mut value, mut grad) = obj.value_gradient(x0)?;
    if !finite(value, &grad) {
        return Err(Error::Numerical("objective is not finite at the starting point".into()));
    }
    let mut x = x0.to_vec();
    let mut iterations = 0;
    let out = |x: Vec<f64>, value, gradient: Vec<f64>, iterations, reason: StopReason| OptimOutcome {
        converged: max_abs(&gradient) < opts.tol,
        x,
        value,
        gradient,
        iterations,
        stop_reason: reason,
    };
    if n == 0 || max_abs(&grad) < opts.tol {
        return Ok(out(x, value, grad, 0, StopReason::GradientTolerance));
    }

    let identity = |g: &[f64]| DMatrix::<f64>::identity(n, n) / max_abs(g).max(1.0);
    let mut fresh_identity = true;
    let mut inv = None;
    if opts.hessian_start {
        if let Ok(h) = hessian(obj, &x, opts.hessian_step) {
            inv = inverse_negated(&h);
        }
    }
    let mut h_inv = match inv {
        Some(m) => {
            fresh_identity = false;
            m
        }
        None => identity(&grad),
    };

    let mut reason = StopReason::IterationLimit;
    while iterations < opts.max_iter {
        if max_abs(&grad) < opts.tol {
            reason = StopReason::GradientTolerance;
            break;
        }
        let g = DVector::from_column_slice(&grad);
        let mut dir = &h_inv * &g;
        let mut slope = g.dot(&dir);
        if !(slope > 0.0) {
            h_inv = identity(&grad);
            fresh_identity = true;
            dir = &h_inv * &g;
            slope = g.dot(&dir);
        }
        let step = match backtrack(obj, &x, value, &dir, slope) {
            Some(s) => s,
            None if !fresh_identity => {
                h_inv = identity(&grad);
                fresh_identity = true;
                continue;
            }
            None => {
                reason = StopReason::LineSearchFailed;
                break;
            }
        };
        iterations += 1;
        let s = DVector::from_iterator(n, step.x.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, grad.iter().zip(&step.gradient).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        let gain = step.value - value;
        let rel = gain / value.abs().max(1.0);
        x = step.x;
        value = step.value;
        grad = step.gradient;
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh_identity {
                h_inv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                fresh_identity = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if rel < opts.rel_improvement {
            reason = StopReason::RelativeImprovement;
            break;
        }
    }
    if max_abs(&grad) < opts.tol {
        reason = StopReason::GradientTolerance;
    }

    if reason != StopReason::GradientTolerance && reason != StopReason::IterationLimit {
        for _ in 0..opts.polish_steps {
            if iterations >= opts.max_iter {
                reason = StopReason::IterationLimit;
                break;
            }
            let Ok(h) = hessian(obj, &x, opts.hessian_step) else { break };
            let Some(inv) = inverse_negated(&h) else { break };
            let g = DVector::from_column_slice(&grad);
            let dir = &inv * &g;
            let slope = g.dot(&dir);
            let step = match newton_at_roundoff(obj, &x, value, &grad, &dir) {
                Some(s) => s,
                None => match backtrack(obj, &x, value, &dir, slope) {
                    Some(s) => s,
                    None => break,
                },
            };
            iterations += 1;
            x = step.x;
            value = step.value;
            grad = step.gradient;
            if max_abs(&grad) < opts.tol {
                reason = StopReason::GradientTolerance;
                break;
            }
        }
    }
    Ok(out(x, value, grad, iterations, reason))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximises_a_concave_quadratic() {
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0] - 1.0, x[1] + 2.0);
            Ok((-(a * a + 10.0 * b * b + a * b), vec![-(2.0 * a + b), -(20.0 * b + a)]))
        };
        let r = maximize(&mut f, &[5.0, 5.0], &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn rosenbrock_without_hessian_start() {
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            let gb = 200.0 * (b - a * a);
            Ok((-v, vec![-ga, -gb]))
        };
        let opts = OptimOptions {
            hessian_start: false,
            ..Default::default()
        };
        let r = maximize(&mut f, &[-1.2, 1.0], &opts).unwrap();
        assert!(r.converged, "{:?}", r.stop_reason);
        assert!((r.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iteration_cap_is_not_an_error() {
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((-(x[0] - 3.0).powi(4), vec![-4.0 * (x[0] - 3.0).powi(3)])) };
        let opts = OptimOptions {
            max_iter: 1,
            ..Default::default()
        };
        let r = maximize(&mut f, &[0.0], &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.stop_reason, StopReason::IterationLimit);
    }

    struct Capped {
        steps: Vec<f64>,
        last: f64,
    }

    impl Objective for Capped {
        fn value_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((-(x[0] - 10.0).powi(2), vec![-2.0 * (x[0] - 10.0)]))
        }

        fn step_limit(&mut self, x: &[f64], d: &[f64]) -> f64 {
            self.steps.push(x[0] - self.last);
            self.last = x[0];
            0.5 / d[0].abs()
        }
    }

    #[test]
    fn step_limit_bounds_every_move() {
        let mut obj = Capped { steps: Vec::new(), last: 0.0 };
        let r = maximize(&mut obj, &[0.0], &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 10.0).abs() < 1e-6);
        assert!(obj.steps.iter().all(|s| s.abs() <= 0.5 + 1e-12), "{:?}", obj.steps);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(maximize(&mut f, &[0.0], &OptimOptions::default()).is_err());
    }
}
