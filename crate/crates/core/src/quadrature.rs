//! Gauss–Hermite rules normalized for expectations under N(0, 1).
//!
//! Nodes come from the eigenvalues of the symmetric Jacobi matrix of the
//! probabilists' Hermite recurrence (zero diagonal, off-diagonal sqrt(k)),
//! and are then polished by Newton steps on the orthonormal recurrence. The
//! weights use the Christoffel form `1 / (n p_{n-1}(x)^2)`, which keeps full
//! relative accuracy even for the tiny tail weights of large rules.

use nalgebra::DMatrix;

use crate::error::{Result, ZibError};

pub const DEFAULT_QUAD_POINTS: usize = 20;
pub const MAX_QUAD_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Orthonormal Hermite values `(p_n(x), p_{n-1}(x))` for the N(0,1) weight.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let kf = k as f64;
        let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

pub fn gauss_hermite(order: usize) -> Result<QuadratureRule> {
    if order == 0 || order > MAX_QUAD_POINTS {
        return Err(ZibError::InvalidOrder(order));
    }
    let n = order;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let mut nodes: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    let nf = n as f64;
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (pn, pn1) = orthonormal_hermite(n, *x);
            let deriv = nf.sqrt() * pn1;
            if deriv == 0.0 {
                break;
            }
            let dx = pn / deriv;
            *x -= dx;
            if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, pn1) = orthonormal_hermite(n, *x);
        weights.push(1.0 / (nf * pn1 * pn1));
    }

    // exact symmetry about zero
    for i in 0..n / 2 {
        let k = n - 1 - i;
        let x = 0.5 * (nodes[k] - nodes[i]);
        let w = 0.5 * (weights[k] + weights[i]);
        nodes[i] = -x;
        nodes[k] = x;
        weights[i] = w;
        weights[k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// `E[f(X)]` for `X ~ N(mean, sd^2)`; exact evaluation `f(mean)` when `sd == 0`.
pub fn expect_normal<F>(f: F, mean: f64, sd: f64, rule: &QuadratureRule) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(sd >= 0.0) {
        return Err(ZibError::InvalidParameter(format!("sd = {sd}")));
    }
    if sd == 0.0 {
        let v = f(mean);
        return if v.is_finite() {
            Ok(v)
        } else {
            Err(ZibError::NonFiniteIntegrand { node: mean })
        };
    }
    let mut acc = 0.0;
    for (z, w) in rule.iter() {
        let at = mean + sd * z;
        let v = f(at);
        if !v.is_finite() {
            return Err(ZibError::NonFiniteIntegrand { node: at });
        }
        acc += w * v;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{link_cdf, LinkKind};

    fn double_factorial_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        (1..k).step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn low_orders() {
        let r1 = gauss_hermite(1).unwrap();
        assert_eq!(r1.nodes(), &[0.0]);
        assert!((r1.weights()[0] - 1.0).abs() < 1e-15);

        let r2 = gauss_hermite(2).unwrap();
        assert!((r2.nodes()[0] + 1.0).abs() < 1e-14);
        assert!((r2.nodes()[1] - 1.0).abs() < 1e-14);
        assert!((r2.weights()[0] - 0.5).abs() < 1e-14);

        let r3 = gauss_hermite(3).unwrap();
        let m4 = expect_normal(|x| x.powi(4), 0.0, 1.0, &r3).unwrap();
        assert!((m4 - 3.0).abs() < 1e-13);
    }

    #[test]
    fn invalid_order() {
        assert!(matches!(gauss_hermite(0), Err(ZibError::InvalidOrder(0))));
        assert!(matches!(gauss_hermite(201), Err(ZibError::InvalidOrder(201))));
        assert!(gauss_hermite(200).is_ok());
    }

    #[test]
    fn rule_invariants() {
        for q in [1, 2, 5, 20, 40, 100, 200] {
            let r = gauss_hermite(q).unwrap();
            let total: f64 = r.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "q={q}");
            assert!(r.nodes().windows(2).all(|w| w[0] < w[1]), "q={q}");
            for i in 0..q {
                assert!((r.nodes()[i] + r.nodes()[q - 1 - i]).abs() < 1e-10);
            }
            assert!(r.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn newton_residual_is_tiny() {
        for q in [10, 50, 200] {
            let r = gauss_hermite(q).unwrap();
            for &x in r.nodes() {
                let (pn, pn1) = orthonormal_hermite(q, x);
                // residual relative to the local slope: distance to the true root
                let dist = (pn / ((q as f64).sqrt() * pn1)).abs();
                assert!(dist < 1e-14 * x.abs().max(1.0), "q={q} x={x} dist={dist}");
            }
        }
    }

    #[test]
    fn moments_up_to_six() {
        for q in [5, 10, 20, 40] {
            let r = gauss_hermite(q).unwrap();
            for k in 0..=6u32 {
                let m = expect_normal(|x| x.powi(k as i32), 0.0, 1.0, &r).unwrap();
                assert!((m - double_factorial_moment(k)).abs() < 1e-10, "q={q} k={k} m={m}");
            }
        }
    }

    #[test]
    fn expectation_examples() {
        let r = gauss_hermite(20).unwrap();
        assert_eq!(expect_normal(|_| 1.0, 3.0, 2.0, &r).unwrap(), {
            r.weights().iter().sum::<f64>()
        });
        assert!((expect_normal(|_| 1.0, -1.0, 0.3, &r).unwrap() - 1.0).abs() < 1e-14);
        let m2 = expect_normal(|x| x * x, 0.0, 1.0, &r).unwrap();
        assert!((m2 - 1.0).abs() < 1e-12);
        // sd = 0 is an exact point evaluation
        assert_eq!(expect_normal(|x| x.exp(), 0.25, 0.0, &r).unwrap(), 0.25f64.exp());
    }

    #[test]
    fn expected_probit_is_half() {
        // trapezoid oracle over [-10, 10] for E[Phi(X)], X ~ N(0,1)
        let n = 200_001;
        let h = 20.0 / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let x = -10.0 + i as f64 * h;
            let dens = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * dens * link_cdf(LinkKind::Probit, x);
        }
        let oracle = acc * h;
        assert!((oracle - 0.5).abs() < 1e-10);
        let r = gauss_hermite(20).unwrap();
        let v = expect_normal(|x| link_cdf(LinkKind::Probit, x), 0.0, 1.0, &r).unwrap();
        assert!((v - oracle).abs() < 1e-10);
    }

    #[test]
    fn non_finite_integrand_reports_node() {
        let r = gauss_hermite(4).unwrap();
        let err = expect_normal(|x| if x > 0.0 { f64::NAN } else { 0.0 }, 0.0, 1.0, &r)
            .unwrap_err();
        assert!(matches!(err, ZibError::NonFiniteIntegrand { node } if node > 0.0));
    }

    fn probit_product(b: f64) -> f64 {
        let etas = [0.3, -0.2, 0.1, 0.9, -0.6];
        etas.iter()
            .enumerate()
            .map(|(j, e)| {
                let c = link_cdf(LinkKind::Probit, e + b);
                if j % 2 == 0 { c } else { 1.0 - c }
            })
            .product()
    }

    #[test]
    fn doubling_twenty_points_is_stable_at_small_spread() {
        let r20 = gauss_hermite(20).unwrap();
        let r40 = gauss_hermite(40).unwrap();
        for sd in [0.25, 0.5] {
            let a = expect_normal(probit_product, 0.0, sd, &r20).unwrap();
            let b = expect_normal(probit_product, 0.0, sd, &r40).unwrap();
            assert!((a - b).abs() < 1e-8, "sd={sd}: {a} vs {b}");
        }
    }

    #[test]
    fn doubling_sixty_points_is_stable_at_large_spread() {
        // twenty points differ from forty by about 7e-7 at sd 1 and 5e-5 at sd 1.5
        let r60 = gauss_hermite(60).unwrap();
        let r120 = gauss_hermite(120).unwrap();
        for sd in [0.5, 1.0, 1.5] {
            let a = expect_normal(probit_product, 0.0, sd, &r60).unwrap();
            let b = expect_normal(probit_product, 0.0, sd, &r120).unwrap();
            assert!((a - b).abs() < 1e-8, "sd={sd}: {a} vs {b}");
        }
    }
}
