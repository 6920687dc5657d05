//! BFGS maximizer with a backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::numeric::max_abs;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimOptions {
    /// Iteration cap.
    pub max_iter: usize,
    /// Convergence threshold on the gradient max-norm.
    pub grad_tol: f64,
    /// Largest allowed move of any coordinate in a single iteration.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the monitor asked to stop.
    pub interrupted: bool,
    /// Objective value after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;

/// Maximizes `objective`, which returns the value and gradient at a point.
///
/// `monitor` sees every accepted iterate and may stop the run early.
/// Accepted steps never lower the objective by more than its rounding level
/// (`1e-12 * max(1, |f|)`); below that level a step is accepted on gradient
/// progress alone.
pub fn bfgs_maximize<F, M>(
    mut objective: F,
    x0: Vec<f64>,
    opts: &OptimOptions,
    mut monitor: M,
) -> OptimOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    M: FnMut(&[f64]) -> Control,
{
    let n = x0.len();
    let mut x = DVector::from_vec(x0);
    let (mut f, g0) = objective(x.as_slice());
    let mut g = DVector::from_vec(g0);
    let mut trace = vec![f];
    let outcome = |x: &DVector<f64>, f, g: &DVector<f64>, it, converged, interrupted, trace| {
        OptimOutcome {
            x: x.as_slice().to_vec(),
            value: f,
            grad: g.as_slice().to_vec(),
            iterations: it,
            converged,
            interrupted,
            trace,
        }
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return outcome(&x, f, &g, 0, false, false, trace);
    }

    let initial_scale = |g: &DVector<f64>| 1.0 / g.norm().max(1.0);
    let mut h = DMatrix::<f64>::identity(n, n) * initial_scale(&g);
    let mut fresh = true;

    for iter in 0..opts.max_iter {
        if max_abs(g.as_slice()) < opts.grad_tol {
            return outcome(&x, f, &g, iter, true, false, trace);
        }
        let mut d = &h * &g;
        let mut slope = g.dot(&d);
        if !(slope > 0.0) {
            h = DMatrix::identity(n, n) * initial_scale(&g);
            fresh = true;
            d = &h * &g;
            slope = g.dot(&d);
        }
        let biggest = max_abs(d.as_slice());
        if biggest > opts.max_step {
            d *= opts.max_step / biggest;
            slope = g.dot(&d);
        }

        let noise = 1e-12 * f.abs().max(1.0);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let xn = &x + &d * alpha;
            let (fn_, gn) = objective(xn.as_slice());
            let gn = DVector::from_vec(gn);
            if fn_.is_finite() && gn.iter().all(|v| v.is_finite()) {
                let armijo = fn_ >= f + ARMIJO * alpha * slope;
                let flat = fn_ >= f - noise && gn.dot(&d).abs() <= 0.9 * slope;
                if armijo || flat {
                    accepted = Some((xn, fn_, gn, alpha));
                    break;
                }
                // quadratic model along the search line
                let curv = (fn_ - f - slope * alpha) / (alpha * alpha);
                let next = if curv < 0.0 { -slope / (2.0 * curv) } else { 0.5 * alpha };
                alpha = next.clamp(0.1 * alpha, 0.5 * alpha);
            } else {
                alpha *= 0.25;
            }
        }

        let Some((xn, fn_, gn, _)) = accepted else {
            if fresh {
                return outcome(&x, f, &g, iter, false, false, trace);
            }
            h = DMatrix::identity(n, n) * initial_scale(&g);
            fresh = true;
            continue;
        };

        // minimization convention: y is the change in the gradient of -f
        let s = &xn - &x;
        let y = &g - &gn;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y')H(I - rho y s') + rho s s'
            h += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }

        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
        if monitor(x.as_slice()) == Control::Stop {
            return outcome(&x, f, &g, iter + 1, false, true, trace);
        }
    }
    let converged = max_abs(g.as_slice()) < opts.grad_tol;
    outcome(&x, f, &g, opts.max_iter, converged, false, trace)
}

/// Central-difference Jacobian of a gradient, i.e. the Hessian of the
/// underlying objective, with step `1e-4 * max(1, |x_j|)` per coordinate.
/// Returned unsymmetrized.
pub fn fd_hessian<G>(mut grad: G, x: &[f64]) -> DMatrix<f64>
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = 1e-4 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let gp = grad(&xp);
        xp[j] = x[j] - h;
        let gm = grad(&xp);
        xp[j] = x[j];
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    hess
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        // f(x) = -(x - c)' A (x - c) / 2
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let obj = |x: &[f64]| {
            let d = DVector::from_row_slice(x) - &c;
            let ad = &a * &d;
            (-0.5 * d.dot(&ad), (-ad).as_slice().to_vec())
        };
        let out = bfgs_maximize(obj, vec![0.0; 3], &OptimOptions::default(), |_| Control::Continue);
        assert!(out.converged);
        for (xi, ci) in out.x.iter().zip(c.iter()) {
            assert!((xi - ci).abs() < 1e-6);
        }
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn maximizes_negative_rosenbrock() {
        let obj = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            let gb = 200.0 * (b - a * a);
            (-f, vec![-ga, -gb])
        };
        let out = bfgs_maximize(obj, vec![-1.2, 1.0], &OptimOptions::default(), |_| Control::Continue);
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn monitor_can_interrupt() {
        let obj = |x: &[f64]| (-(x[0] - 10.0).powi(2), vec![-2.0 * (x[0] - 10.0)]);
        let out = bfgs_maximize(obj, vec![0.0], &OptimOptions::default(), |x| {
            if x[0] > 1.0 { Control::Stop } else { Control::Continue }
        });
        assert!(out.interrupted && !out.converged);
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let obj = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            (-f, vec![2.0 * (1.0 - a) + 400.0 * a * (b - a * a), -200.0 * (b - a * a)])
        };
        let opts = OptimOptions { max_iter: 3, ..Default::default() };
        let out = bfgs_maximize(obj, vec![-1.2, 1.0], &opts, |_| Control::Continue);
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
    }

    #[test]
    fn fd_hessian_exact_for_quadratic() {
        let a = DMatrix::from_row_slice(3, 3, &[5.0, -1.0, 2.0, -1.0, 3.0, 0.25, 2.0, 0.25, 7.0]);
        let b = DVector::from_vec(vec![0.3, -0.1, 2.0]);
        // f = x'Ax/2 + b'x, gradient Ax + b
        let grad = |x: &[f64]| (&a * DVector::from_row_slice(x) + &b).as_slice().to_vec();
        let h = fd_hessian(grad, &[0.7, -3.0, 120.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((h[(i, j)] - a[(i, j)]).abs() < 1e-6);
            }
        }
    }
}
