//! Maximum likelihood for the zero-inflated probit random-intercept model.
//!
//! Subject `i` contributes
//!
//! ```text
//! L_i = I(y_i = 0) (1 - p) + p * E_b[ prod_j F(x_ij' gamma + b)^y_ij (1 - F(.))^(1 - y_ij) ]
//! ```
//!
//! with `b ~ N(0, sigma_b^2)` integrated out by a fixed Gauss–Hermite rule.
//! Per-node products are accumulated in log space and combined with a
//! log-sum-exp. The optimizer works on `(logit p, log sigma_b, gamma)`; the
//! naive GLMM is the same machinery with `p` pinned at 1.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, ParameterSet, SubjectRecord};
use crate::error::{Result, ZibError};
use crate::link::{cdf_factor_and_ratio, link_cdf, LinkKind};
use crate::numeric::{expit, logit, max_abs, CompensatedSum};
use crate::optim::{bfgs_maximize, fd_hessian, Control, OptimOptions};
use crate::quadrature::QuadratureRule;

/// Iterates beyond these limits are treated as boundary solutions.
pub const LOGIT_P_BOUNDARY: f64 = 12.0;
pub const LOG_SIGMA_BOUNDARY: f64 = -12.0;
/// Random-intercept SD assumed when building starting values.
const INIT_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryFlag {
    None,
    PAtOne,
    SigmaAtZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MlModel {
    ZeroInflated,
    Glmm,
}

#[derive(Debug, Clone)]
pub struct MlFit {
    pub model: MlModel,
    /// Conditional gamma, sigma_b and p.
    pub params: ParameterSet,
    pub loglik: f64,
    /// Inverse observed information over the free unconstrained coordinates.
    pub vcov_unconstrained: Option<DMatrix<f64>>,
    /// Covariance over `(p, sigma_b, gamma)`; rows of pinned parameters are zero.
    pub vcov_natural: Option<DMatrix<f64>>,
    /// `gamma / sqrt(1 + sigma_b^2)`, probit link only.
    pub marginal_beta: Option<Vec<f64>>,
    pub marginal_vcov: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub boundary: BoundaryFlag,
    pub p_pinned: bool,
    pub sigma_pinned: bool,
    pub grad_norm: f64,
    /// Relative asymmetry of the finite-difference Hessian before symmetrizing.
    pub hessian_asymmetry: Option<f64>,
    /// Log-likelihood after each accepted optimizer step.
    pub trace: Vec<f64>,
    pub link: LinkKind,
    pub quad_points: usize,
    pub n_subjects: usize,
    pub n_observations: usize,
}

impl MlFit {
    /// Standard error of the natural-scale parameter at `index` in
    /// `(p, sigma_b, gamma...)`; `None` for pinned parameters.
    pub fn natural_se(&self, index: usize) -> Option<f64> {
        if (index == 0 && self.p_pinned) || (index == 1 && self.sigma_pinned) {
            return None;
        }
        self.vcov_natural
            .as_ref()
            .map(|v| v[(index, index)].max(0.0).sqrt())
    }

    pub fn marginal_se(&self) -> Option<Vec<f64>> {
        self.marginal_vcov.as_ref().map(|v| {
            (0..v.nrows())
                .map(|i| v[(i, i)].max(0.0).sqrt())
                .collect()
        })
    }
}

/// Which coordinates of `(logit p, log sigma_b, gamma)` are free.
#[derive(Debug, Clone, Copy)]
struct Layout {
    p_free: bool,
    sigma_free: bool,
    k: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        self.k + self.p_free as usize + self.sigma_free as usize
    }

    /// Maps a full gradient `(logit p, log sigma, gamma)` to the free coordinates.
    fn project(&self, full: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        if self.p_free {
            out.push(full[0]);
        }
        if self.sigma_free {
            out.push(full[1]);
        }
        out.extend_from_slice(&full[2..]);
        out
    }

    fn theta(&self, params: &ParameterSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        if self.p_free {
            out.push(logit(params.p));
        }
        if self.sigma_free {
            out.push(params.sigma_b.unwrap_or(0.0).ln());
        }
        out.extend_from_slice(&params.coefficients);
        out
    }

    fn params(&self, theta: &[f64], pinned_p: f64, pinned_sigma: f64) -> ParameterSet {
        let mut i = 0;
        let p = if self.p_free {
            i += 1;
            expit(theta[0])
        } else {
            pinned_p
        };
        let sigma = if self.sigma_free {
            i += 1;
            theta[i - 1].exp()
        } else {
            pinned_sigma
        };
        ParameterSet::ml(theta[i..].to_vec(), sigma, p)
    }

    fn logit_p(&self, theta: &[f64]) -> Option<f64> {
        self.p_free.then(|| theta[0])
    }

    fn log_sigma(&self, theta: &[f64]) -> Option<f64> {
        self.sigma_free.then(|| theta[self.p_free as usize])
    }
}

/// Reusable buffers for one subject's quadrature sum.
#[derive(Default)]
struct Scratch {
    eta: Vec<f64>,
    log_terms: Vec<f64>,
    deta: Vec<f64>,
    dlogsig: Vec<f64>,
}

/// Log-likelihood contribution of one subject and, when `grad` is given,
/// its gradient over `(logit p, log sigma, gamma)` added into `grad`.
#[allow(clippy::too_many_arguments)]
fn subject_contribution(
    subject: &SubjectRecord,
    gamma: &[f64],
    sigma: f64,
    p: f64,
    rule: &QuadratureRule,
    link: LinkKind,
    scratch: &mut Scratch,
    grad: Option<&mut [f64]>,
) -> f64 {
    let j_size = subject.y.len();
    scratch.eta.clear();
    scratch
        .eta
        .extend(subject.x.iter().map(|row| row.iter().zip(gamma).map(|(a, b)| a * b).sum::<f64>()));

    let (nodes, weights): (&[f64], &[f64]) = if sigma == 0.0 {
        (&[0.0], &[1.0])
    } else {
        (rule.nodes(), rule.weights())
    };
    let q_size = nodes.len();
    scratch.log_terms.clear();
    scratch.deta.clear();
    scratch.deta.resize(q_size * j_size, 0.0);
    scratch.dlogsig.clear();

    for (q, (&z, &w)) in nodes.iter().zip(weights).enumerate() {
        let b = sigma * z;
        let mut lq = 0.0;
        let mut prod = w;
        let mut dls = 0.0;
        for (j, (&y, &eta)) in subject.y.iter().zip(&scratch.eta).enumerate() {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let (factor, log_part, ratio) = cdf_factor_and_ratio(link, sign * (eta + b));
            prod *= factor;
            lq += log_part;
            if prod < 1e-200 {
                lq += prod.ln();
                prod = 1.0;
            }
            let d = sign * ratio;
            scratch.deta[q * j_size + j] = d;
            dls += d * b;
        }
        scratch.log_terms.push(lq + prod.ln());
        scratch.dlogsig.push(dls);
    }

    let m = scratch
        .log_terms
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for lt in scratch.log_terms.iter_mut() {
        *lt = (*lt - m).exp();
        total += *lt;
    }
    let log_f = m + total.ln();

    let all_zero = subject.is_all_zero();
    let (loglik, posterior) = if !all_zero {
        (p.ln() + log_f, 1.0)
    } else if p >= 1.0 {
        (log_f, 1.0)
    } else {
        let a = (1.0 - p).ln();
        let b = p.ln() + log_f;
        let l = crate::numeric::log_add_exp(a, b);
        (l, (b - l).exp())
    };

    if let Some(grad) = grad {
        grad[0] += posterior - p;
        let mut dsig = 0.0;
        for (q, &wq) in scratch.log_terms.iter().enumerate() {
            let omega = wq / total;
            dsig += omega * scratch.dlogsig[q];
        }
        grad[1] += posterior * dsig;
        for j in 0..j_size {
            let mut dj = 0.0;
            for (q, &wq) in scratch.log_terms.iter().enumerate() {
                dj += wq * scratch.deta[q * j_size + j];
            }
            let dj = posterior * dj / total;
            for (g, xk) in grad[2..].iter_mut().zip(&subject.x[j]) {
                *g += dj * xk;
            }
        }
    }
    loglik
}

fn check_ml_params(params: &ParameterSet, k: usize) -> Result<f64> {
    params.check()?;
    if params.coefficients.len() != k {
        return Err(ZibError::InvalidParameter(format!(
            "{} coefficients for {} covariates",
            params.coefficients.len(),
            k
        )));
    }
    params
        .sigma_b
        .ok_or_else(|| ZibError::InvalidParameter("sigma_b required".into()))
}

/// Log-likelihood of one subject; `0 <= p <= 1` (boundary allowed).
pub fn subject_loglik(
    subject: &SubjectRecord,
    params: &ParameterSet,
    rule: &QuadratureRule,
    link: LinkKind,
) -> Result<f64> {
    let k = subject.x.first().map_or(0, Vec::len);
    let sigma = check_ml_params(params, k)?;
    let mut scratch = Scratch::default();
    Ok(subject_contribution(
        subject,
        &params.coefficients,
        sigma,
        params.p,
        rule,
        link,
        &mut scratch,
        None,
    ))
}

/// Sum of subject log-likelihoods (compensated, order-independent).
pub fn total_loglik(
    data: &ClusteredDataset,
    params: &ParameterSet,
    rule: &QuadratureRule,
    link: LinkKind,
) -> Result<f64> {
    let sigma = check_ml_params(params, data.n_covariates())?;
    let mut scratch = Scratch::default();
    let mut acc = CompensatedSum::new();
    for s in data.subjects() {
        acc.add(subject_contribution(
            s,
            &params.coefficients,
            sigma,
            params.p,
            rule,
            link,
            &mut scratch,
            None,
        ));
    }
    Ok(acc.total())
}

/// Log-likelihood and gradient over `(logit p, log sigma_b, gamma)`.
pub fn total_loglik_and_gradient(
    data: &ClusteredDataset,
    params: &ParameterSet,
    rule: &QuadratureRule,
    link: LinkKind,
) -> Result<(f64, Vec<f64>)> {
    let sigma = check_ml_params(params, data.n_covariates())?;
    Ok(loglik_and_gradient(data, &params.coefficients, sigma, params.p, rule, link))
}

fn loglik_and_gradient(
    data: &ClusteredDataset,
    gamma: &[f64],
    sigma: f64,
    p: f64,
    rule: &QuadratureRule,
    link: LinkKind,
) -> (f64, Vec<f64>) {
    let mut scratch = Scratch::default();
    let mut grad = vec![0.0; gamma.len() + 2];
    let mut acc = CompensatedSum::new();
    for s in data.subjects() {
        acc.add(subject_contribution(
            s,
            gamma,
            sigma,
            p,
            rule,
            link,
            &mut scratch,
            Some(&mut grad),
        ));
    }
    (acc.total(), grad)
}

/// Binary GLM ignoring clustering and zero inflation, by Fisher scoring.
pub fn independent_binary_fit(data: &ClusteredDataset, link: LinkKind) -> Result<Vec<f64>> {
    let k = data.n_covariates();
    let mut beta = vec![0.0; k];
    for _ in 0..100 {
        let mut info = DMatrix::<f64>::zeros(k, k);
        let mut score = nalgebra::DVector::<f64>::zeros(k);
        for s in data.subjects() {
            for (row, &y) in s.x.iter().zip(&s.y) {
                let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let mu = link_cdf(link, eta).min(1.0 - 1e-12);
                let d = crate::link::link_pdf(link, eta.clamp(-37.5, 37.5)).max(1e-300);
                let var = mu * (1.0 - mu);
                let w = d * d / var;
                let r = (y as f64 - mu) * d / var;
                for a in 0..k {
                    score[a] += r * row[a];
                    for b in 0..k {
                        info[(a, b)] += w * row[a] * row[b];
                    }
                }
            }
        }
        let step = info
            .clone()
            .cholesky()
            .ok_or(ZibError::InsufficientData(
                "design matrix is rank deficient".into(),
            ))?
            .solve(&score);
        let step_max = max_abs(step.as_slice());
        let scale = if step_max > 2.0 { 2.0 / step_max } else { 1.0 };
        for (b, d) in beta.iter_mut().zip(step.iter()) {
            *b += scale * d;
        }
        if step_max < 1e-10 {
            break;
        }
    }
    Ok(beta)
}

/// Starting value for `p`: one minus the excess of all-zero subjects over
/// what an intercept-only independent model predicts, kept in [0.05, 0.95].
pub fn initial_p(data: &ClusteredDataset) -> f64 {
    let ybar = data
        .subjects()
        .iter()
        .flat_map(|s| s.y.iter())
        .map(|&v| v as f64)
        .sum::<f64>()
        / data.n_observations() as f64;
    let z_rand = data
        .subjects()
        .iter()
        .map(|s| (1.0 - ybar).powi(s.y.len() as i32))
        .sum::<f64>()
        / data.n_subjects() as f64;
    let z_bar = data.all_zero_fraction();
    (1.0 - (z_bar - z_rand).max(0.0)).clamp(0.05, 0.95)
}

/// Starting values: `p` from [`initial_p`], `gamma` from an independent
/// binary fit rescaled for a random intercept of SD 0.5.
pub fn auto_init(data: &ClusteredDataset, link: LinkKind) -> Result<ParameterSet> {
    let p0 = initial_p(data);
    let scale = (1.0 + INIT_SIGMA * INIT_SIGMA).sqrt();
    let gamma0 = independent_binary_fit(data, link)?
        .into_iter()
        .map(|g| g * scale)
        .collect();
    Ok(ParameterSet::ml(gamma0, INIT_SIGMA, p0))
}

/// Delta-method marginalization of conditional probit coefficients.
///
/// `vcov_sigma_gamma` is the covariance over `(sigma_b, gamma)`.
pub fn marginalize(
    gamma: &[f64],
    sigma_b: f64,
    vcov_sigma_gamma: Option<&DMatrix<f64>>,
) -> (Vec<f64>, Option<DMatrix<f64>>) {
    let s2 = 1.0 + sigma_b * sigma_b;
    let scale = s2.sqrt();
    let beta: Vec<f64> = gamma.iter().map(|g| g / scale).collect();
    let vcov = vcov_sigma_gamma.map(|v| {
        let k = gamma.len();
        let mut jac = DMatrix::<f64>::zeros(k, k + 1);
        for (i, g) in gamma.iter().enumerate() {
            jac[(i, 0)] = -g * sigma_b / (s2 * scale);
            jac[(i, i + 1)] = 1.0 / scale;
        }
        let out = &jac * v * jac.transpose();
        (&out + out.transpose()) * 0.5
    });
    (beta, vcov)
}

/// Negative Hessian of the total log-likelihood at an interior estimate, by
/// central differences of the analytic gradient over
/// `(logit p, log sigma_b, gamma)`, symmetrized.
pub fn observed_information(
    data: &ClusteredDataset,
    params_hat: &ParameterSet,
    rule: &QuadratureRule,
    link: LinkKind,
) -> Result<DMatrix<f64>> {
    let sigma = check_ml_params(params_hat, data.n_covariates())?;
    if params_hat.p <= 0.0 || params_hat.p >= 1.0 {
        return Err(ZibError::BoundaryParameter { what: "p" });
    }
    if sigma <= 0.0 {
        return Err(ZibError::BoundaryParameter { what: "sigma_b" });
    }
    let layout = Layout {
        p_free: true,
        sigma_free: true,
        k: data.n_covariates(),
    };
    let (info, _) = information_for(data, &layout, params_hat, rule, link);
    Ok(info)
}

fn information_for(
    data: &ClusteredDataset,
    layout: &Layout,
    params: &ParameterSet,
    rule: &QuadratureRule,
    link: LinkKind,
) -> (DMatrix<f64>, f64) {
    let pinned_p = params.p;
    let pinned_sigma = params.sigma_b.unwrap_or(0.0);
    let theta = layout.theta(params);
    let grad = |t: &[f64]| {
        let ps = layout.params(t, pinned_p, pinned_sigma);
        let (_, g) = loglik_and_gradient(
            data,
            &ps.coefficients,
            ps.sigma_b.unwrap_or(0.0),
            ps.p,
            rule,
            link,
        );
        layout.project(&g)
    };
    let hess = fd_hessian(grad, &theta);
    let scale = hess.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let asym = (&hess - hess.transpose())
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        / scale;
    let sym = (&hess + hess.transpose()) * -0.5;
    (sym, asym)
}

fn invert_pd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = Cholesky::new(m.clone())?;
    let inv = chol.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

struct Optimized {
    theta: Vec<f64>,
    loglik: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    hit: Option<BoundaryFlag>,
    trace: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn optimize(
    data: &ClusteredDataset,
    layout: &Layout,
    start: &ParameterSet,
    pinned_p: f64,
    pinned_sigma: f64,
    rule: &QuadratureRule,
    link: LinkKind,
    options: &OptimOptions,
) -> Optimized {
    let objective = |t: &[f64]| {
        let ps = layout.params(t, pinned_p, pinned_sigma);
        let (f, g) = loglik_and_gradient(
            data,
            &ps.coefficients,
            ps.sigma_b.unwrap_or(0.0),
            ps.p,
            rule,
            link,
        );
        (f, layout.project(&g))
    };
    let mut hit = None;
    let monitor = |t: &[f64]| {
        if layout.logit_p(t).is_some_and(|v| v > LOGIT_P_BOUNDARY) {
            hit = Some(BoundaryFlag::PAtOne);
            Control::Stop
        } else if layout.log_sigma(t).is_some_and(|v| v < LOG_SIGMA_BOUNDARY) {
            hit = Some(BoundaryFlag::SigmaAtZero);
            Control::Stop
        } else {
            Control::Continue
        }
    };
    let out = bfgs_maximize(objective, layout.theta(start), options, monitor);
    let mut result = Optimized {
        grad_norm: max_abs(&out.grad),
        theta: out.x,
        loglik: out.value,
        iterations: out.iterations,
        converged: out.converged,
        hit,
        trace: out.trace,
    };
    if !result.converged && result.hit.is_none() && result.iterations < options.max_iter {
        newton_polish(data, layout, pinned_p, pinned_sigma, rule, link, options, &mut result);
    }
    result
}

/// Newton iterations with a finite-difference Hessian, used when the line
/// search can no longer resolve progress in the objective value.
#[allow(clippy::too_many_arguments)]
fn newton_polish(
    data: &ClusteredDataset,
    layout: &Layout,
    pinned_p: f64,
    pinned_sigma: f64,
    rule: &QuadratureRule,
    link: LinkKind,
    options: &OptimOptions,
    state: &mut Optimized,
) {
    let eval = |t: &[f64]| {
        let ps = layout.params(t, pinned_p, pinned_sigma);
        let (f, g) = loglik_and_gradient(
            data,
            &ps.coefficients,
            ps.sigma_b.unwrap_or(0.0),
            ps.p,
            rule,
            link,
        );
        (f, layout.project(&g))
    };
    for _ in 0..5 {
        let hess = fd_hessian(|t| eval(t).1, &state.theta);
        let neg = (&hess + hess.transpose()) * -0.5;
        let Some(chol) = Cholesky::new(neg) else { return };
        let (_, g) = eval(&state.theta);
        let step = chol.solve(&nalgebra::DVector::from_vec(g));
        let cand: Vec<f64> = state.theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let (f, g) = eval(&cand);
        let gn = max_abs(&g);
        if !(f.is_finite() && gn < state.grad_norm && f >= state.loglik - 1e-9 * state.loglik.abs().max(1.0)) {
            return;
        }
        state.theta = cand;
        state.loglik = f;
        state.grad_norm = gn;
        state.iterations += 1;
        state.trace.push(f);
        if gn < options.grad_tol {
            state.converged = true;
            return;
        }
    }
}

fn sanitize_start(init: &ParameterSet, k: usize) -> Result<ParameterSet> {
    if init.coefficients.len() != k {
        return Err(ZibError::InvalidParameter(format!(
            "initial values have {} coefficients, data has {}",
            init.coefficients.len(),
            k
        )));
    }
    init.check()?;
    Ok(ParameterSet::ml(
        init.coefficients.clone(),
        init.sigma_b.unwrap_or(INIT_SIGMA).max(1e-3),
        init.p.clamp(1e-4, 1.0 - 1e-4),
    ))
}

fn fit_with(
    data: &ClusteredDataset,
    link: LinkKind,
    rule: &QuadratureRule,
    init: Option<&ParameterSet>,
    options: &OptimOptions,
    model: MlModel,
) -> Result<MlFit> {
    let k = data.n_covariates();
    let start = match init {
        Some(p) => sanitize_start(p, k)?,
        None => auto_init(data, link)?,
    };
    let mut layout = Layout {
        p_free: model == MlModel::ZeroInflated,
        sigma_free: true,
        k,
    };
    let mut pinned_p = 1.0;
    let mut pinned_sigma = 0.0;
    let mut current = start;
    let mut boundary = BoundaryFlag::None;
    let mut iterations = 0;
    let mut trace: Vec<f64> = Vec::new();

    let result = loop {
        let out = optimize(data, &layout, &current, pinned_p, pinned_sigma, rule, link, options);
        iterations += out.iterations;
        trace.extend_from_slice(&out.trace);
        current = layout.params(&out.theta, pinned_p, pinned_sigma);
        match out.hit {
            Some(BoundaryFlag::PAtOne) => {
                layout.p_free = false;
                pinned_p = 1.0;
                boundary = BoundaryFlag::PAtOne;
            }
            Some(BoundaryFlag::SigmaAtZero) => {
                layout.sigma_free = false;
                pinned_sigma = 0.0;
                if boundary == BoundaryFlag::None {
                    boundary = BoundaryFlag::SigmaAtZero;
                }
            }
            _ => break out,
        }
        if iterations >= options.max_iter {
            break out;
        }
    };
    current = layout.params(&result.theta, pinned_p, pinned_sigma);

    if !result.converged {
        return Err(ZibError::NonConvergence {
            iterations,
            grad_norm: result.grad_norm,
            last: Box::new(current),
        });
    }

    let (info, asym) = information_for(data, &layout, &current, rule, link);
    let vcov_u = invert_pd(&info);
    let sigma = current.sigma_b.unwrap_or(0.0);
    let vcov_natural = vcov_u.as_ref().map(|vu| {
        let dim = k + 2;
        let mut jac = DMatrix::<f64>::zeros(dim, layout.dim());
        let mut col = 0;
        if layout.p_free {
            jac[(0, col)] = current.p * (1.0 - current.p);
            col += 1;
        }
        if layout.sigma_free {
            jac[(1, col)] = sigma;
            col += 1;
        }
        for i in 0..k {
            jac[(2 + i, col + i)] = 1.0;
        }
        let v = &jac * vu * jac.transpose();
        (&v + v.transpose()) * 0.5
    });
    let (marginal_beta, marginal_vcov) = if link == LinkKind::Probit {
        let block = vcov_natural
            .as_ref()
            .map(|v| v.view((1, 1), (k + 1, k + 1)).clone_owned());
        let (b, v) = marginalize(&current.coefficients, sigma, block.as_ref());
        (Some(b), v)
    } else {
        (None, None)
    };

    Ok(MlFit {
        model,
        params: current,
        loglik: result.loglik,
        vcov_unconstrained: vcov_u,
        vcov_natural,
        marginal_beta,
        marginal_vcov,
        converged: true,
        iterations,
        boundary,
        p_pinned: !layout.p_free,
        sigma_pinned: !layout.sigma_free,
        grad_norm: result.grad_norm,
        hessian_asymmetry: Some(asym),
        trace,
        link,
        quad_points: rule.order(),
        n_subjects: data.n_subjects(),
        n_observations: data.n_observations(),
    })
}

/// Zero-inflated model by maximum likelihood. When `logit p` exceeds
/// [`LOGIT_P_BOUNDARY`] the fit continues with `p` pinned at 1 and is flagged.
pub fn fit_ml(
    data: &ClusteredDataset,
    link: LinkKind,
    rule: &QuadratureRule,
    init: Option<&ParameterSet>,
    options: &OptimOptions,
) -> Result<MlFit> {
    fit_with(data, link, rule, init, options, MlModel::ZeroInflated)
}

/// Naive random-intercept model ignoring zero inflation (`p` fixed at 1).
pub fn fit_glmm(
    data: &ClusteredDataset,
    link: LinkKind,
    rule: &QuadratureRule,
    init: Option<&ParameterSet>,
    options: &OptimOptions,
) -> Result<MlFit> {
    let init = init.map(|p| ParameterSet { p: 1.0 - 1e-4, ..p.clone() });
    fit_with(data, link, rule, init.as_ref(), options, MlModel::Glmm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gauss_hermite;

    fn one_subject(y: Vec<u8>, etas: &[f64]) -> SubjectRecord {
        let x = etas.iter().map(|&e| vec![e]).collect();
        SubjectRecord::new("s", y, x)
    }

    #[test]
    fn closed_forms_at_zero_sigma() {
        let rule = gauss_hermite(20).unwrap();
        let params = ParameterSet::ml(vec![1.0], 0.0, 0.7);
        let s = one_subject(vec![0, 0], &[0.0, 0.0]);
        let l = subject_loglik(&s, &params, &rule, LinkKind::Probit).unwrap();
        assert!((l - 0.475f64.ln()).abs() < 1e-14);
        let s = one_subject(vec![1, 0], &[0.0, 0.0]);
        let l = subject_loglik(&s, &params, &rule, LinkKind::Probit).unwrap();
        assert!((l - 0.175f64.ln()).abs() < 1e-14);
    }

    /// Trapezoid rule over b in [-10 sigma, 10 sigma] with 20001 points.
    fn trapezoid_subject_lik(y: &[u8], etas: &[f64], sigma: f64, p: f64) -> f64 {
        let n = 20001;
        let lo = -10.0 * sigma;
        let h = 20.0 * sigma / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let b = lo + i as f64 * h;
            let dens = (-0.5 * (b / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let mut prod = 1.0;
            for (&yy, &e) in y.iter().zip(etas) {
                let c = crate::link::normal_cdf(e + b);
                prod *= if yy == 1 { c } else { 1.0 - c };
            }
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * prod * dens;
        }
        let integral = acc * h;
        let zero = if y.iter().all(|&v| v == 0) { 1.0 - p } else { 0.0 };
        (zero + p * integral).ln()
    }

    #[test]
    fn quadrature_matches_trapezoid_example() {
        let etas = [0.3, -0.2, 0.1];
        let s = one_subject(vec![0, 0, 0], &etas);
        let rule = gauss_hermite(20).unwrap();
        let params = ParameterSet::ml(vec![1.0], 0.5, 0.6);
        let l = subject_loglik(&s, &params, &rule, LinkKind::Probit).unwrap();
        let oracle = trapezoid_subject_lik(&[0, 0, 0], &etas, 0.5, 0.6);
        assert!(((l - oracle) / oracle).abs() < 1e-10, "{l} vs {oracle}");

        // a wide random intercept needs more nodes for the same accuracy
        let rule = gauss_hermite(80).unwrap();
        for y in [vec![0, 0, 0], vec![1, 0, 1]] {
            let s = one_subject(y.clone(), &etas);
            let params = ParameterSet::ml(vec![1.0], 1.5, 0.6);
            let l = subject_loglik(&s, &params, &rule, LinkKind::Probit).unwrap();
            let oracle = trapezoid_subject_lik(&y, &etas, 1.5, 0.6);
            assert!(((l - oracle) / oracle).abs() < 1e-10, "{l} vs {oracle}");
        }
    }

    #[test]
    fn p_one_matches_plain_glmm_for_every_outcome() {
        let rule = gauss_hermite(20).unwrap();
        let etas = [0.4, -0.3, 0.2];
        for code in 0..8u8 {
            let y: Vec<u8> = (0..3).map(|j| (code >> j) & 1).collect();
            let s = one_subject(y.clone(), &etas);
            let l = subject_loglik(&s, &ParameterSet::ml(vec![1.0], 0.8, 1.0), &rule, LinkKind::Probit)
                .unwrap();
            // plain GLMM: direct quadrature of the Bernoulli product
            let direct = rule
                .iter()
                .map(|(z, w)| {
                    w * y
                        .iter()
                        .zip(&etas)
                        .map(|(&yy, &e)| {
                            let c = link_cdf(LinkKind::Probit, e + 0.8 * z);
                            if yy == 1 { c } else { 1.0 - c }
                        })
                        .product::<f64>()
                })
                .sum::<f64>()
                .ln();
            assert!((l - direct).abs() < 1e-12, "y={y:?}");
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let rule = gauss_hermite(12).unwrap();
        let subjects = vec![
            SubjectRecord::new("a", vec![0, 0, 0], vec![vec![1.0, 0.5], vec![1.0, -0.2], vec![1.0, 1.1]]),
            SubjectRecord::new("b", vec![1, 0, 1], vec![vec![1.0, -0.7], vec![1.0, 0.3], vec![1.0, 0.0]]),
            SubjectRecord::new("c", vec![0, 1, 1], vec![vec![1.0, 2.0], vec![1.0, 0.1], vec![1.0, -1.0]]),
        ];
        let data = ClusteredDataset::new(subjects, vec!["i".into(), "x".into()], true).unwrap();
        for link in [LinkKind::Probit, LinkKind::Logit] {
            let theta = [0.4, -0.3, 0.2, 0.8];
            let eval = |t: &[f64]| {
                let ps = ParameterSet::ml(t[2..].to_vec(), t[1].exp(), expit(t[0]));
                total_loglik_and_gradient(&data, &ps, &rule, link).unwrap()
            };
            let (_, g) = eval(&theta);
            for i in 0..4 {
                let h = 1e-6;
                let mut tp = theta;
                tp[i] += h;
                let mut tm = theta;
                tm[i] -= h;
                let fd = (eval(&tp).0 - eval(&tm).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "{link} i={i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn marginalize_examples() {
        let gamma = [0.0, 1.0, -0.5, -0.4, 0.2, 0.4];
        let (beta, _) = marginalize(&gamma, 0.5, None);
        let expect = [0.0, 0.894, -0.447, -0.358, 0.179, 0.358];
        for (b, e) in beta.iter().zip(expect) {
            assert!((b - e).abs() < 5e-4);
        }
        let (beta, _) = marginalize(&[1.0], 1.5, None);
        assert!((beta[0] - 0.555).abs() < 5e-4);
        let (beta, _) = marginalize(&gamma, 0.0, None);
        assert_eq!(beta, gamma.to_vec());
    }

    #[test]
    fn marginal_vcov_delta_method() {
        // finite-difference Jacobian of the map (sigma, gamma) -> beta
        let gamma = [0.3, -1.2];
        let sigma = 0.9;
        let v = DMatrix::from_row_slice(3, 3, &[0.04, 0.01, 0.0, 0.01, 0.09, 0.02, 0.0, 0.02, 0.16]);
        let (_, vb) = marginalize(&gamma, sigma, Some(&v));
        let vb = vb.unwrap();
        let map = |s: f64, g: &[f64]| g.iter().map(|x| x / (1.0 + s * s).sqrt()).collect::<Vec<_>>();
        let mut jac = DMatrix::<f64>::zeros(2, 3);
        let h = 1e-6;
        let bp = map(sigma + h, &gamma);
        let bm = map(sigma - h, &gamma);
        for i in 0..2 {
            jac[(i, 0)] = (bp[i] - bm[i]) / (2.0 * h);
            jac[(i, i + 1)] = 1.0 / (1.0 + sigma * sigma).sqrt();
        }
        let expect = &jac * v * jac.transpose();
        assert!((vb - expect).abs().max() < 1e-10);
    }

    #[test]
    fn total_loglik_additivity_and_order() {
        let rule = gauss_hermite(20).unwrap();
        let subjects: Vec<_> = (0..40)
            .map(|i| {
                let x = (i as f64 * 0.37).sin();
                let y = (0..4).map(|j| ((i * 7 + j * 3) % 5 == 0) as u8).collect();
                SubjectRecord::new(format!("s{i}"), y, (0..4).map(|_| vec![1.0, x]).collect())
            })
            .collect();
        let names = vec!["i".to_string(), "x".to_string()];
        let data = ClusteredDataset::new(subjects.clone(), names.clone(), true).unwrap();
        let params = ParameterSet::ml(vec![-0.5, 0.8], 0.7, 0.6);
        let base = total_loglik(&data, &params, &rule, LinkKind::Probit).unwrap();

        let single = data.with_subjects(vec![subjects[3].clone()]).unwrap();
        let l1 = total_loglik(&single, &params, &rule, LinkKind::Probit).unwrap();
        let s1 = subject_loglik(&subjects[3], &params, &rule, LinkKind::Probit).unwrap();
        assert_eq!(l1, s1);

        let mut doubled = subjects.clone();
        doubled.extend(subjects.iter().map(|s| SubjectRecord { id: format!("{}b", s.id), ..s.clone() }));
        let ld = total_loglik(&data.with_subjects(doubled).unwrap(), &params, &rule, LinkKind::Probit).unwrap();
        assert!((ld - 2.0 * base).abs() < 1e-10);

        let mut rev = subjects;
        rev.reverse();
        rev.swap(3, 17);
        let lr = total_loglik(&data.with_subjects(rev).unwrap(), &params, &rule, LinkKind::Probit).unwrap();
        assert!((lr - base).abs() < 1e-10);
    }
}
