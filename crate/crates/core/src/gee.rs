//! Marginal estimating equations for zero-inflated clustered binary data.
//!
//! The marginal mean is `mu^M = p * Phi(x' beta)`. `(p, beta)` solve
//! `sum_i D_i' V_i^{-1} (y_i - mu_i^M) = 0` with `V_i = A^{1/2} R_i A^{1/2}`
//! and one of five working correlations `R_i`. Variances come from the
//! sandwich `A^{-1} B A^{-1}`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Association, ClusteredDataset, ParameterSet};
use crate::error::{Result, ZibError};
use crate::link::{link_cdf, link_pdf, LinkKind};
use crate::ml::{independent_binary_fit, initial_p, BoundaryFlag};
use crate::numeric::{expit, logit, max_abs};

const P_MIN: f64 = 1e-6;
const P_MAX: f64 = 1.0 - 1e-6;
const ALPHA_CLAMP: f64 = 0.99;
const MIN_EIGENVALUE: f64 = 1e-10;
const MU_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WorkingCorrelationKind {
    Mi,
    Ci,
    Me,
    Ce,
    Un,
}

impl WorkingCorrelationKind {
    pub const ALL: [WorkingCorrelationKind; 5] = [
        WorkingCorrelationKind::Mi,
        WorkingCorrelationKind::Ci,
        WorkingCorrelationKind::Me,
        WorkingCorrelationKind::Ce,
        WorkingCorrelationKind::Un,
    ];

    pub fn has_alpha(self) -> bool {
        matches!(self, Self::Me | Self::Ce | Self::Un)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Mi => "MI",
            Self::Ci => "CI",
            Self::Me => "ME",
            Self::Ce => "CE",
            Self::Un => "UN",
        }
    }
}

impl std::fmt::Display for WorkingCorrelationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for WorkingCorrelationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().trim_start_matches("GEE-") {
            "MI" => Ok(Self::Mi),
            "CI" => Ok(Self::Ci),
            "ME" => Ok(Self::Me),
            "CE" => Ok(Self::Ce),
            "UN" => Ok(Self::Un),
            other => Err(format!("unknown working correlation '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeOptions {
    pub max_iter: usize,
    /// Stop once the largest parameter change falls below this...
    pub param_tol: f64,
    /// ...and the estimating-function max-norm is below this.
    pub ef_tol: f64,
    pub max_halvings: usize,
    /// Hold the exchangeable association at this value instead of estimating it.
    pub fixed_alpha: Option<f64>,
    /// Hold `p` at this value and solve for `beta` only.
    pub fixed_p: Option<f64>,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            param_tol: 1e-8,
            ef_tol: 1e-6,
            max_halvings: 20,
            fixed_alpha: None,
            fixed_p: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeeFit {
    /// Marginal beta, p and the association estimate.
    pub params: ParameterSet,
    /// Sandwich covariance over `(p, beta)`; the `p` row is zero when `p` is held fixed.
    pub vcov_sandwich: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub boundary: BoundaryFlag,
    pub kind: WorkingCorrelationKind,
    pub p_fixed: bool,
    /// Max-norm of the estimating function at the reported solution.
    pub ef_norm: f64,
    pub n_subjects: usize,
    pub n_observations: usize,
}

impl GeeFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.vcov_sandwich.nrows())
            .map(|i| self.vcov_sandwich[(i, i)].max(0.0).sqrt())
            .collect()
    }
}

fn require_probit(link: LinkKind) -> Result<()> {
    if link == LinkKind::Probit {
        Ok(())
    } else {
        Err(ZibError::UnsupportedLink)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn marginal_mean(x_row: &[f64], beta: &[f64], p: f64, link: LinkKind) -> Result<f64> {
    require_probit(link)?;
    Ok(p * link_cdf(link, dot(x_row, beta)))
}

/// Gradient of the marginal mean over `(p, beta)`.
pub fn mean_jacobian(x_row: &[f64], beta: &[f64], p: f64, link: LinkKind) -> Result<Vec<f64>> {
    require_probit(link)?;
    let eta = dot(x_row, beta);
    let d = p * link_pdf(link, eta);
    let mut out = Vec::with_capacity(x_row.len() + 1);
    out.push(link_cdf(link, eta));
    out.extend(x_row.iter().map(|x| d * x));
    Ok(out)
}

/// Total covariance of two outcomes given their conditional covariance
/// `v_z_jk` in the susceptible class.
pub fn unconditional_cov(mu_z_j: f64, mu_z_k: f64, p: f64, v_z_jk: f64) -> f64 {
    v_z_jk * p + mu_z_j * mu_z_k * p * (1.0 - p)
}

fn exchangeable_alpha(alpha: Option<&Association>) -> Result<f64> {
    match alpha {
        Some(Association::Exchangeable(a)) => Ok(*a),
        _ => Err(ZibError::InvalidParameter(
            "exchangeable working correlation needs a scalar alpha".into(),
        )),
    }
}

/// Working correlation without the positive-definiteness check.
fn build_correlation(
    kind: WorkingCorrelationKind,
    mu_z: &[f64],
    p: f64,
    alpha: Option<&Association>,
) -> Result<DMatrix<f64>> {
    let j = mu_z.len();
    let mut r = DMatrix::<f64>::identity(j, j);
    match kind {
        WorkingCorrelationKind::Mi => {}
        WorkingCorrelationKind::Me => {
            let a = exchangeable_alpha(alpha)?;
            r.fill(a);
            r.fill_diagonal(1.0);
        }
        WorkingCorrelationKind::Un => match alpha {
            Some(Association::Unstructured(m)) if m.nrows() == j && m.ncols() == j => {
                r.copy_from(m);
                r.fill_diagonal(1.0);
            }
            _ => {
                return Err(ZibError::InvalidParameter(format!(
                    "unstructured working correlation needs a {j}x{j} alpha"
                )))
            }
        },
        WorkingCorrelationKind::Ci | WorkingCorrelationKind::Ce => {
            let a = if kind == WorkingCorrelationKind::Ce {
                exchangeable_alpha(alpha)?
            } else {
                0.0
            };
            let var_m: Vec<f64> = mu_z.iter().map(|m| m * p * (1.0 - m * p)).collect();
            let sd_z: Vec<f64> = mu_z.iter().map(|m| (m * (1.0 - m)).sqrt()).collect();
            for r_idx in 0..j {
                for c in 0..r_idx {
                    let num = a * p * sd_z[r_idx] * sd_z[c]
                        + mu_z[r_idx] * mu_z[c] * p * (1.0 - p);
                    let v = num / (var_m[r_idx] * var_m[c]).sqrt();
                    r[(r_idx, c)] = v;
                    r[(c, r_idx)] = v;
                }
            }
        }
    }
    Ok(r)
}

fn check_pd(r: &DMatrix<f64>) -> Result<()> {
    let min = r
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min < MIN_EIGENVALUE {
        Err(ZibError::NonPDWorkingCorrelation { min_eigenvalue: min })
    } else {
        Ok(())
    }
}

/// Working correlation for one cluster with conditional means `mu_z`.
pub fn working_correlation(
    kind: WorkingCorrelationKind,
    mu_z: &[f64],
    p: f64,
    alpha: Option<&Association>,
) -> Result<DMatrix<f64>> {
    if mu_z.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
        return Err(ZibError::InvalidParameter("mu_z must lie in (0, 1)".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(ZibError::InvalidParameter(format!("p = {p}")));
    }
    let r = build_correlation(kind, mu_z, p, alpha)?;
    check_pd(&r)?;
    Ok(r)
}

/// Moment estimate of the association parameters for ME, CE and UN
/// (`None` for MI and CI). `y` and `mu_z` are per-subject vectors.
pub fn estimate_alpha(
    kind: WorkingCorrelationKind,
    y: &[Vec<f64>],
    mu_z: &[Vec<f64>],
    p: f64,
) -> Result<Option<Association>> {
    if !kind.has_alpha() {
        return Ok(None);
    }
    if y.len() < 2 {
        return Err(ZibError::InsufficientData(
            "association estimate needs at least 2 subjects".into(),
        ));
    }
    let pearson = |yy: &[f64], mz: &[f64]| -> Vec<f64> {
        yy.iter()
            .zip(mz)
            .map(|(&v, &m)| {
                let mm = p * m;
                (v - mm) / (mm * (1.0 - mm)).max(MU_FLOOR).sqrt()
            })
            .collect()
    };
    let clamp = |a: f64| a.clamp(-ALPHA_CLAMP, ALPHA_CLAMP);
    match kind {
        WorkingCorrelationKind::Un => {
            let j = y[0].len();
            if y.iter().any(|v| v.len() != j) {
                return Err(ZibError::UnequalClusterSizes);
            }
            let mut acc = DMatrix::<f64>::zeros(j, j);
            for (yy, mz) in y.iter().zip(mu_z) {
                let e = pearson(yy, mz);
                for a in 0..j {
                    for b in 0..a {
                        acc[(a, b)] += e[a] * e[b];
                    }
                }
            }
            let n = y.len() as f64;
            let mut out = DMatrix::<f64>::identity(j, j);
            for a in 0..j {
                for b in 0..a {
                    let v = clamp(acc[(a, b)] / n);
                    out[(a, b)] = v;
                    out[(b, a)] = v;
                }
            }
            Ok(Some(Association::Unstructured(out)))
        }
        _ => {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for (yy, mz) in y.iter().zip(mu_z) {
                let e = pearson(yy, mz);
                for a in 0..yy.len() {
                    for b in 0..a {
                        sum += if kind == WorkingCorrelationKind::Me {
                            e[a] * e[b]
                        } else {
                            let cov = (yy[a] - p * mz[a]) * (yy[b] - p * mz[b]);
                            let num = cov - mz[a] * mz[b] * p * (1.0 - p);
                            num / (p * (mz[a] * (1.0 - mz[a]) * mz[b] * (1.0 - mz[b])).sqrt())
                        };
                        pairs += 1;
                    }
                }
            }
            if pairs == 0 {
                return Err(ZibError::InsufficientData(
                    "no within-cluster pairs to estimate alpha".into(),
                ));
            }
            Ok(Some(Association::Exchangeable(clamp(sum / pairs as f64))))
        }
    }
}

/// Per-subject pieces of the estimating equations over `(p, beta)` or `beta`.
struct SubjectSystem {
    dvd: DMatrix<f64>,
    u: DVector<f64>,
}

fn clamp_mu(m: f64) -> f64 {
    m.clamp(MU_FLOOR, 1.0 - MU_FLOOR)
}

#[allow(clippy::too_many_arguments)]
fn subject_system(
    x: &[Vec<f64>],
    y: &[f64],
    beta: &[f64],
    p: f64,
    with_p: bool,
    kind: WorkingCorrelationKind,
    alpha: Option<&Association>,
    shared_r: Option<&DMatrix<f64>>,
) -> Result<SubjectSystem> {
    let j = y.len();
    let k = beta.len();
    let dim = k + with_p as usize;
    let off = with_p as usize;
    let mut d = DMatrix::<f64>::zeros(j, dim);
    let mut resid = DVector::<f64>::zeros(j);
    let mut sd = vec![0.0; j];
    let mut mu_z = vec![0.0; j];
    for (row, xr) in x.iter().enumerate() {
        let eta = dot(xr, beta);
        let mz = clamp_mu(link_cdf(LinkKind::Probit, eta));
        let dens = link_pdf(LinkKind::Probit, eta.clamp(-37.5, 37.5));
        mu_z[row] = mz;
        let mm = p * mz;
        sd[row] = (mm * (1.0 - mm)).max(MU_FLOOR).sqrt();
        resid[row] = y[row] - mm;
        if with_p {
            d[(row, 0)] = mz;
        }
        for c in 0..k {
            d[(row, off + c)] = p * dens * xr[c];
        }
    }

    if kind == WorkingCorrelationKind::Mi {
        let mut vd = d.clone();
        let mut vr = resid.clone();
        for row in 0..j {
            let v = sd[row] * sd[row];
            vd.row_mut(row).scale_mut(1.0 / v);
            vr[row] /= v;
        }
        return Ok(SubjectSystem {
            dvd: d.transpose() * vd,
            u: d.transpose() * vr,
        });
    }

    let mut v = match shared_r {
        Some(r) => r.clone(),
        None => build_correlation(kind, &mu_z, p, alpha)?,
    };
    let r_copy = v.clone();
    for a in 0..j {
        for b in 0..j {
            v[(a, b)] *= sd[a] * sd[b];
        }
    }
    let chol = match Cholesky::new(v) {
        Some(c) => c,
        None => {
            check_pd(&r_copy)?;
            return Err(ZibError::NonPDWorkingCorrelation { min_eigenvalue: 0.0 });
        }
    };
    let vd = chol.solve(&d);
    let vr = chol.solve(&resid);
    Ok(SubjectSystem {
        dvd: d.transpose() * vd,
        u: d.transpose() * vr,
    })
}

struct Prepared {
    x: Vec<Vec<Vec<f64>>>,
    y: Vec<Vec<f64>>,
}

fn prepare(data: &ClusteredDataset) -> Prepared {
    Prepared {
        x: data.subjects().iter().map(|s| s.x.clone()).collect(),
        y: data
            .subjects()
            .iter()
            .map(|s| s.y.iter().map(|&v| v as f64).collect())
            .collect(),
    }
}

fn conditional_means(prep: &Prepared, beta: &[f64]) -> Vec<Vec<f64>> {
    prep.x
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|r| clamp_mu(link_cdf(LinkKind::Probit, dot(r, beta))))
                .collect()
        })
        .collect()
}

/// Sums of `D'V^{-1}D`, `D'V^{-1}r` and `U_i U_i'` over subjects.
struct Totals {
    bread: DMatrix<f64>,
    u: DVector<f64>,
    meat: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
fn totals(
    prep: &Prepared,
    beta: &[f64],
    p: f64,
    with_p: bool,
    kind: WorkingCorrelationKind,
    alpha: Option<&Association>,
    want_meat: bool,
) -> Result<Totals> {
    let dim = beta.len() + with_p as usize;
    let shared = if kind == WorkingCorrelationKind::Un {
        let j = prep.y.first().map_or(0, Vec::len);
        let r = build_correlation(kind, &vec![0.5; j], p, alpha)?;
        check_pd(&r)?;
        Some(r)
    } else {
        None
    };
    let mut out = Totals {
        bread: DMatrix::zeros(dim, dim),
        u: DVector::zeros(dim),
        meat: DMatrix::zeros(dim, dim),
    };
    // exchangeable matrices depend only on the cluster size
    let mut me_cache: Option<(usize, DMatrix<f64>)> = None;
    for (x, y) in prep.x.iter().zip(&prep.y) {
        if kind == WorkingCorrelationKind::Me && me_cache.as_ref().map(|(n, _)| *n) != Some(y.len()) {
            let r = build_correlation(kind, &vec![0.5; y.len()], p, alpha)?;
            check_pd(&r)?;
            me_cache = Some((y.len(), r));
        }
        let shared_here = match kind {
            WorkingCorrelationKind::Me => me_cache.as_ref().map(|(_, r)| r),
            _ => shared.as_ref(),
        };
        let s = subject_system(x, y, beta, p, with_p, kind, alpha, shared_here)?;
        out.bread += &s.dvd;
        out.u += &s.u;
        if want_meat {
            out.meat += &s.u * s.u.transpose();
        }
    }
    Ok(out)
}

fn sandwich(t: &Totals) -> Result<DMatrix<f64>> {
    let inv = t
        .bread
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(ZibError::SingularBread)?;
    let v = &inv * &t.meat * inv.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

fn embed(v: &DMatrix<f64>, with_p: bool) -> DMatrix<f64> {
    if with_p {
        return v.clone();
    }
    let n = v.nrows() + 1;
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((1, 1), (n - 1, n - 1)).copy_from(v);
    out
}

/// `A^{-1} B A^{-1}` over `(p, beta)` at the parameters stored in `fit`.
pub fn sandwich_vcov(data: &ClusteredDataset, fit: &GeeFit) -> Result<DMatrix<f64>> {
    let prep = prepare(data);
    let t = totals(
        &prep,
        &fit.params.coefficients,
        fit.params.p,
        !fit.p_fixed,
        fit.kind,
        fit.params.alpha.as_ref(),
        true,
    )?;
    Ok(embed(&sandwich(&t)?, !fit.p_fixed))
}

/// Estimating function `sum_i D_i' V_i^{-1}(y_i - mu_i^M)` over `(p, beta)`
/// for real-valued responses.
pub fn estimating_function(
    x: &[Vec<Vec<f64>>],
    y: &[Vec<f64>],
    beta: &[f64],
    p: f64,
    kind: WorkingCorrelationKind,
    alpha: Option<&Association>,
) -> Result<Vec<f64>> {
    let prep = Prepared {
        x: x.to_vec(),
        y: y.to_vec(),
    };
    let t = totals(&prep, beta, p, true, kind, alpha, false)?;
    Ok(t.u.as_slice().to_vec())
}

fn fixed_association(kind: WorkingCorrelationKind, a: f64) -> Option<Association> {
    match kind {
        WorkingCorrelationKind::Me | WorkingCorrelationKind::Ce => Some(Association::Exchangeable(a)),
        _ => None,
    }
}

pub fn fit_gee(
    data: &ClusteredDataset,
    kind: WorkingCorrelationKind,
    link: LinkKind,
    init: Option<&ParameterSet>,
    options: &GeeOptions,
) -> Result<GeeFit> {
    require_probit(link)?;
    if kind == WorkingCorrelationKind::Un && data.common_cluster_size().is_none() {
        return Err(ZibError::UnequalClusterSizes);
    }
    if data.n_subjects() < 2 {
        return Err(ZibError::InsufficientData("GEE needs at least 2 subjects".into()));
    }
    let k = data.n_covariates();
    let (mut beta, p0) = match init {
        Some(ps) => {
            if ps.coefficients.len() != k {
                return Err(ZibError::InvalidParameter(format!(
                    "initial values have {} coefficients, data has {k}",
                    ps.coefficients.len()
                )));
            }
            (ps.coefficients.clone(), ps.p)
        }
        None => (independent_binary_fit(data, link)?, initial_p(data)),
    };
    let with_p = options.fixed_p.is_none();
    let p_fixed_value = options.fixed_p.unwrap_or(0.0);
    let (lo, hi) = (logit(P_MIN), logit(P_MAX));
    let mut lp = logit(options.fixed_p.unwrap_or(p0).clamp(P_MIN, P_MAX));
    let p_of = |lp: f64| if with_p { expit(lp) } else { p_fixed_value };

    let prep = prepare(data);
    let alpha_at = |beta: &[f64], p: f64| -> Result<Option<Association>> {
        match options.fixed_alpha {
            Some(a) if kind.has_alpha() => Ok(fixed_association(kind, a)),
            _ => estimate_alpha(kind, &prep.y, &conditional_means(&prep, beta), p),
        }
    };

    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut boundary = BoundaryFlag::None;
    let mut alpha;
    let mut ef_norm;
    loop {
        let p = p_of(lp);
        alpha = alpha_at(&beta, p)?;
        let t = totals(&prep, &beta, p, with_p, kind, alpha.as_ref(), false)?;
        ef_norm = max_abs(t.u.as_slice());
        if ef_norm < options.ef_tol && last_change < options.param_tol {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        if with_p && lp >= hi {
            boundary = BoundaryFlag::PAtOne;
            break;
        }
        iterations += 1;

        let step = match Cholesky::new(t.bread.clone()) {
            Some(c) => c.solve(&t.u),
            None => t.bread.clone().lu().solve(&t.u).ok_or(ZibError::SingularBread)?,
        };
        // natural-scale step for p mapped to the logit scale
        let mut dtheta = step.as_slice().to_vec();
        if with_p {
            dtheta[0] /= p * (1.0 - p);
        }

        let mut best: Option<(f64, f64, Vec<f64>, f64)> = None;
        let mut scale = 1.0;
        for _ in 0..=options.max_halvings {
            let cand_lp = if with_p { (lp + scale * dtheta[0]).clamp(lo, hi) } else { lp };
            let cand_beta: Vec<f64> = beta
                .iter()
                .zip(&dtheta[with_p as usize..])
                .map(|(b, d)| b + scale * d)
                .collect();
            // trials are compared at the current association; one whose
            // re-estimated association is inadmissible counts as a failed step
            let cand_p = p_of(cand_lp);
            let mut norm = totals(&prep, &cand_beta, cand_p, with_p, kind, alpha.as_ref(), false)
                .map(|t| max_abs(t.u.as_slice()))
                .unwrap_or(f64::INFINITY);
            if norm < ef_norm
                && alpha_at(&cand_beta, cand_p)
                    .and_then(|a| totals(&prep, &cand_beta, cand_p, with_p, kind, a.as_ref(), false))
                    .is_err()
            {
                norm = f64::INFINITY;
            }
            let change = (cand_lp - lp)
                .abs()
                .max(max_abs(&cand_beta.iter().zip(&beta).map(|(a, b)| a - b).collect::<Vec<_>>()));
            if best.as_ref().is_none_or(|b| norm < b.0) {
                best = Some((norm, cand_lp, cand_beta, change));
            }
            if norm < ef_norm {
                break;
            }
            scale *= 0.5;
        }
        let (_, new_lp, new_beta, change) = best.expect("at least one trial step");
        lp = new_lp;
        beta = new_beta;
        last_change = change;
    }

    let p = p_of(lp);
    let t = totals(&prep, &beta, p, with_p, kind, alpha.as_ref(), true)?;
    let params = ParameterSet {
        coefficients: beta,
        sigma_b: None,
        p,
        alpha,
    };
    if boundary == BoundaryFlag::PAtOne {
        let vcov = sandwich(&t)
            .map(|v| embed(&v, with_p))
            .unwrap_or_else(|_| DMatrix::from_element(k + 1, k + 1, f64::NAN));
        return Err(ZibError::BoundarySolution {
            last: Box::new(GeeFit {
                params,
                vcov_sandwich: vcov,
                converged: false,
                iterations,
                boundary,
                kind,
                p_fixed: !with_p,
                ef_norm,
                n_subjects: data.n_subjects(),
                n_observations: data.n_observations(),
            }),
        });
    }
    if !converged {
        return Err(ZibError::GeeNonConvergence {
            iterations,
            ef_norm,
            last: Box::new(params),
        });
    }
    let vcov = embed(&sandwich(&t)?, with_p);
    Ok(GeeFit {
        params,
        vcov_sandwich: vcov,
        converged,
        iterations,
        boundary,
        kind,
        p_fixed: !with_p,
        ef_norm,
        n_subjects: data.n_subjects(),
        n_observations: data.n_observations(),
    })
}
