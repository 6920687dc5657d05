//! Probit (and logit) link functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

/// Linear predictors are clamped to this range before the probit CDF so that
/// neither tail underflows to an exact 0 or 1.
pub const ETA_CLAMP: f64 = 37.5;
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    #[default]
    Probit,
    Logit,
}

impl std::fmt::Display for LinkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LinkKind::Probit => f.write_str("probit"),
            LinkKind::Logit => f.write_str("logit"),
        }
    }
}

#[inline]
fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF through the complementary error function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(u: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * u)
}

#[inline]
fn logistic(x: f64) -> f64 {
    crate::numeric::expit(x)
}

pub fn link_cdf(kind: LinkKind, eta: f64) -> f64 {
    let eta = clamp_eta(eta);
    let v = match kind {
        LinkKind::Probit => normal_cdf(eta),
        LinkKind::Logit => logistic(eta),
    };
    v.max(PROB_FLOOR)
}

pub fn link_pdf(kind: LinkKind, eta: f64) -> f64 {
    match kind {
        LinkKind::Probit => normal_pdf(eta),
        LinkKind::Logit => {
            let m = logistic(eta);
            m * (1.0 - m)
        }
    }
}

/// `(log F(t), F'(t) / F(t))` for the clamped argument, evaluated without
/// forming `1 - F` when the upper tail would lose precision.
#[inline]
pub(crate) fn log_cdf_and_ratio(kind: LinkKind, t: f64) -> (f64, f64) {
    let t = clamp_eta(t);
    match kind {
        LinkKind::Probit => {
            let dens = normal_pdf(t);
            if t < -20.0 {
                // Laplace continued fraction for Phi(-a) / phi(a)
                let a = -t;
                let mut cf = a;
                for k in (1..40).rev() {
                    cf = a + k as f64 / cf;
                }
                (-0.5 * a * a - 0.5 * (2.0 * PI).ln() - cf.ln(), cf)
            } else if t < 0.0 {
                let c = (0.5 * erfc(-t * FRAC_1_SQRT_2)).max(PROB_FLOOR);
                (c.ln(), dens / c)
            } else {
                let q = 0.5 * erfc(t * FRAC_1_SQRT_2);
                ((-q).ln_1p(), dens / (1.0 - q))
            }
        }
        LinkKind::Logit => {
            // log F(t) = -log(1 + e^{-t}); f/F = 1 - F(t)
            let log_f = if t >= 0.0 {
                -(-t).exp().ln_1p()
            } else {
                t - t.exp().ln_1p()
            };
            (log_f, logistic(-t))
        }
    }
}

/// `F(t)` split as `factor * exp(log_part)` together with `F'(t) / F(t)`.
/// Only the far lower tail of the probit uses `log_part`, so products of
/// factors can be accumulated without a logarithm per term.
#[inline]
pub(crate) fn cdf_factor_and_ratio(kind: LinkKind, t: f64) -> (f64, f64, f64) {
    let t = clamp_eta(t);
    match kind {
        LinkKind::Probit if t < -20.0 => {
            let (lf, ratio) = log_cdf_and_ratio(kind, t);
            (1.0, lf, ratio)
        }
        LinkKind::Probit => {
            let dens = normal_pdf(t);
            let c = if t < 0.0 {
                0.5 * erfc(-t * FRAC_1_SQRT_2)
            } else {
                1.0 - 0.5 * erfc(t * FRAC_1_SQRT_2)
            };
            (c, 0.0, dens / c)
        }
        LinkKind::Logit => {
            let c = logistic(t);
            (c, 0.0, 1.0 - c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Normal CDF from the Taylor series of erf for |x| small and the
    /// Laplace continued fraction for the tail; independent of erfc above.
    fn oracle_normal_cdf(x: f64) -> f64 {
        if x.abs() < 3.0 {
            let z = x / SQRT_2;
            let mut term = z;
            let mut sum = z;
            for n in 1..200 {
                term *= -z * z / n as f64;
                let add = term / (2 * n + 1) as f64;
                sum += add;
                if add.abs() < 1e-18 {
                    break;
                }
            }
            0.5 + sum / PI.sqrt()
        } else {
            let a = x.abs();
            // Mills ratio continued fraction, evaluated bottom-up
            let mut cf = a;
            for k in (1..300).rev() {
                cf = a + k as f64 / cf;
            }
            let tail = normal_pdf(a) / cf;
            if x > 0.0 { 1.0 - tail } else { tail }
        }
    }

    #[test]
    fn probit_cdf_examples() {
        assert_eq!(link_cdf(LinkKind::Probit, 0.0), 0.5);
        assert!((link_cdf(LinkKind::Probit, 1.959964) - 0.975).abs() < 1e-6);
        assert!((oracle_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert_eq!(link_cdf(LinkKind::Logit, 0.0), 0.5);
    }

    #[test]
    fn probit_matches_series_oracle_relative() {
        let mut x = -8.0;
        while x <= 8.0 {
            let a = normal_cdf(x);
            let b = oracle_normal_cdf(x);
            // relative accuracy on the smaller tail probability
            let (ta, tb) = if x > 0.0 { (normal_cdf(-x), oracle_normal_cdf(-x)) } else { (a, b) };
            assert!(((ta - tb) / tb).abs() < 1e-12, "x={x}: {ta} vs {tb}");
            x += 0.0625;
        }
    }

    #[test]
    fn pdf_examples() {
        assert!((link_pdf(LinkKind::Probit, 0.0) - 0.3989423).abs() < 1e-6);
        assert!((link_pdf(LinkKind::Probit, 0.0) - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert_eq!(link_pdf(LinkKind::Probit, 1.3), link_pdf(LinkKind::Probit, -1.3));
        assert_eq!(link_pdf(LinkKind::Logit, 0.0), 0.25);
    }

    #[test]
    fn pdf_matches_finite_difference_on_grid() {
        for kind in [LinkKind::Probit, LinkKind::Logit] {
            let mut eta = -8.0;
            while eta <= 8.0 {
                let h = 1e-5;
                let fd = (link_cdf(kind, eta + h) - link_cdf(kind, eta - h)) / (2.0 * h);
                assert!((fd - link_pdf(kind, eta)).abs() < 1e-6, "{kind} eta={eta}");
                eta += 0.1;
            }
        }
    }

    #[test]
    fn cdf_symmetry() {
        for kind in [LinkKind::Probit, LinkKind::Logit] {
            for i in 0..=160 {
                let eta = -8.0 + 0.1 * i as f64;
                let s = link_cdf(kind, -eta) + link_cdf(kind, eta);
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extreme_predictors_stay_inside_unit_interval() {
        let lo = link_cdf(LinkKind::Probit, -1e6);
        assert!(lo > 0.0 && lo <= 1e-300);
        assert!(link_cdf(LinkKind::Probit, 1e6) <= 1.0);
        let (lf, r) = log_cdf_and_ratio(LinkKind::Probit, -1e3);
        assert!(lf.is_finite() && r.is_finite());
        assert!((r - 37.5).abs() < 0.1);
    }

    #[test]
    fn log_cdf_and_ratio_consistent() {
        for kind in [LinkKind::Probit, LinkKind::Logit] {
            for i in 0..=80 {
                let t = -10.0 + 0.25 * i as f64;
                let (lf, ratio) = log_cdf_and_ratio(kind, t);
                let f = link_cdf(kind, t);
                assert!((lf - f.ln()).abs() < 1e-12 * lf.abs().max(1e-3), "{kind} t={t}");
                assert!((ratio - link_pdf(kind, t) / f).abs() < 1e-10 * ratio.max(1.0));
            }
        }
    }

    #[test]
    fn factor_form_agrees_with_log_form() {
        for kind in [LinkKind::Probit, LinkKind::Logit] {
            for i in 0..=400 {
                let t = -40.0 + 0.2 * i as f64;
                let (a, b, r1) = cdf_factor_and_ratio(kind, t);
                let (lf, r2) = log_cdf_and_ratio(kind, t);
                assert!((a.ln() + b - lf).abs() < 1e-12 * lf.abs().max(1e-3), "{kind} t={t}");
                assert!((r1 - r2).abs() < 1e-12 * r2.max(1.0), "{kind} t={t}");
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        for &u in &[1e-10, 0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((normal_cdf(normal_quantile(u)) - u).abs() < 1e-14 * u.max(1e-3) * 1e3);
        }
    }
}
