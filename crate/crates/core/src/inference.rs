//! Likelihood-ratio test for zero inflation, Wald intervals and the
//! identifiability diagnostic.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::data::{ClusteredDataset, ParameterSet};
use crate::error::{Result, ZibError};
use crate::link::{normal_quantile, LinkKind};
use crate::ml::{fit_glmm, fit_ml, MlFit, MlModel};
use crate::optim::OptimOptions;
use crate::quadrature::QuadratureRule;

/// Tolerance below zero within which a likelihood-ratio statistic is rounding noise.
pub const LAMBDA_TOLERANCE: f64 = 1e-6;
/// Distinct values above which a covariate column counts as continuous.
pub const CONTINUOUS_THRESHOLD: usize = 20;
/// Distinct covariate patterns needed for identification without a continuous covariate.
pub const MIN_PATTERNS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub lambda: f64,
    pub p_value: f64,
    pub l1: f64,
    pub l0: f64,
}

/// Survival function of the 50:50 mixture of a point mass at zero and chi-square(1).
pub fn boundary_mixture_pvalue(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        1.0
    } else {
        0.5 * gamma_ur(0.5, 0.5 * lambda)
    }
}

pub fn lrt_zero_inflation(fit_zi: &MlFit, fit_glmm: &MlFit) -> Result<LrtResult> {
    if fit_zi.model != MlModel::ZeroInflated || fit_glmm.model != MlModel::Glmm {
        return Err(ZibError::MismatchedFits(
            "expected a zero-inflated fit and a plain GLMM fit".into(),
        ));
    }
    if fit_zi.n_subjects != fit_glmm.n_subjects
        || fit_zi.n_observations != fit_glmm.n_observations
    {
        return Err(ZibError::MismatchedFits("fits use different datasets".into()));
    }
    if fit_zi.link != fit_glmm.link {
        return Err(ZibError::MismatchedFits("fits use different links".into()));
    }
    if fit_zi.quad_points != fit_glmm.quad_points {
        return Err(ZibError::MismatchedFits(
            "fits use different quadrature rules".into(),
        ));
    }
    if !(fit_zi.converged && fit_glmm.converged) {
        return Err(ZibError::MismatchedFits("both fits must have converged".into()));
    }
    lrt_from_logliks(fit_zi.loglik, fit_glmm.loglik)
}

pub fn lrt_from_logliks(l1: f64, l0: f64) -> Result<LrtResult> {
    let mut lambda = 2.0 * (l1 - l0);
    if lambda < -LAMBDA_TOLERANCE {
        return Err(ZibError::NegativeLambda { lambda });
    }
    if lambda < 0.0 {
        lambda = 0.0;
    }
    Ok(LrtResult {
        lambda,
        p_value: boundary_mixture_pvalue(lambda),
        l1,
        l0,
    })
}

/// Fits both models and tests for zero inflation. If the zero-inflated fit
/// ends below the GLMM it is restarted once from the GLMM estimates with
/// `p = 0.95`, since the GLMM is nested at `p = 1`.
pub fn lrt_workflow(
    data: &ClusteredDataset,
    link: LinkKind,
    rule: &QuadratureRule,
    options: &OptimOptions,
) -> Result<(MlFit, MlFit, LrtResult)> {
    let glmm = fit_glmm(data, link, rule, None, options)?;
    let mut zi = fit_ml(data, link, rule, None, options)?;
    if zi.loglik < glmm.loglik - 0.5 * LAMBDA_TOLERANCE {
        let start = ParameterSet::ml(
            glmm.params.coefficients.clone(),
            glmm.params.sigma_b.unwrap_or(0.5).max(1e-3),
            0.95,
        );
        let retry = fit_ml(data, link, rule, Some(&start), options)?;
        if retry.loglik > zi.loglik {
            zi = retry;
        }
    }
    let lrt = lrt_zero_inflation(&zi, &glmm)?;
    Ok((zi, glmm, lrt))
}

/// Two-sided Wald interval `estimate -/+ z se`.
pub fn wald_ci(estimate: f64, se: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile(0.5 * (1.0 + level));
    (estimate - z * se, estimate + z * se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    /// First non-intercept column with at least 20 distinct values.
    pub continuous_covariate: Option<String>,
    pub distinct_patterns: usize,
    pub identified: bool,
    pub message: String,
}

pub fn identifiability_check(data: &ClusteredDataset) -> IdentifiabilityReport {
    let k = data.n_covariates();
    let first = usize::from(data.has_intercept());
    let rows = || data.subjects().iter().flat_map(|s| s.x.iter());
    for c in first..k {
        let distinct: HashSet<u64> = rows().map(|r| r[c].to_bits()).collect();
        if distinct.len() >= CONTINUOUS_THRESHOLD {
            let name = data.column_names()[c].clone();
            let patterns = rows()
                .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<HashSet<_>>()
                .len();
            return IdentifiabilityReport {
                message: format!("continuous covariate present ({name}); identified"),
                continuous_covariate: Some(name),
                distinct_patterns: patterns,
                identified: true,
            };
        }
    }
    let patterns = rows()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len();
    let identified = patterns >= MIN_PATTERNS;
    let message = if identified {
        format!("{patterns} distinct covariate patterns; identified")
    } else {
        format!(
            "warning: only {patterns} distinct covariate patterns (need at least {MIN_PATTERNS}); p and sigma_b may not be identified"
        )
    };
    IdentifiabilityReport {
        continuous_covariate: None,
        distinct_patterns: patterns,
        identified,
        message,
    }
}
