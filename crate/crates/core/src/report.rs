//! Fit, LRT and simulation reports with JSON and plain-text renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Association;
use crate::error::{Result, ZibError};
use crate::gee::GeeFit;
use crate::inference::{wald_ci, IdentifiabilityReport, LrtResult};
use crate::ml::{BoundaryFlag, MlFit, MlModel};
use crate::simulation::{SimDesign, SimulationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl CoefficientRow {
    fn new(name: &str, estimate: f64, se: Option<f64>, level: f64) -> Self {
        let se = se.filter(|s| s.is_finite());
        let ci = se.map(|s| wald_ci(estimate, s, level));
        CoefficientRow {
            name: name.to_string(),
            estimate,
            se,
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaReport {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl From<&Association> for AlphaReport {
    fn from(a: &Association) -> Self {
        match a {
            Association::Exchangeable(v) => AlphaReport::Scalar(*v),
            Association::Unstructured(m) => AlphaReport::Matrix(
                (0..m.nrows())
                    .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub estimator: String,
    pub link: String,
    pub ci_level: f64,
    /// `marginal` for population-averaged coefficients, `conditional` otherwise.
    pub coefficient_scale: String,
    pub coefficients: Vec<CoefficientRow>,
    /// Subject-specific coefficients of the likelihood fits.
    pub conditional_coefficients: Option<Vec<CoefficientRow>>,
    pub p: Option<CoefficientRow>,
    pub sigma_b: Option<CoefficientRow>,
    pub alpha: Option<AlphaReport>,
    pub loglik: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub boundary: BoundaryFlag,
}

impl FitReport {
    pub fn from_ml(fit: &MlFit, names: &[String], level: f64) -> Self {
        let se_nat = |i| fit.natural_se(i);
        let conditional: Vec<CoefficientRow> = names
            .iter()
            .zip(&fit.params.coefficients)
            .enumerate()
            .map(|(i, (n, g))| CoefficientRow::new(n, *g, se_nat(i + 2), level))
            .collect();
        let (scale, coefficients, conditional_coefficients) = match &fit.marginal_beta {
            Some(beta) => {
                let se = fit.marginal_se();
                let rows = names
                    .iter()
                    .zip(beta)
                    .enumerate()
                    .map(|(i, (n, b))| CoefficientRow::new(n, *b, se.as_ref().map(|s| s[i]), level))
                    .collect();
                ("marginal", rows, Some(conditional))
            }
            None => ("conditional", conditional, None),
        };
        FitReport {
            estimator: match fit.model {
                MlModel::ZeroInflated => "ML".into(),
                MlModel::Glmm => "GLMM".into(),
            },
            link: fit.link.to_string(),
            ci_level: level,
            coefficient_scale: scale.into(),
            coefficients,
            conditional_coefficients,
            p: (fit.model == MlModel::ZeroInflated)
                .then(|| CoefficientRow::new("p", fit.params.p, se_nat(0), level)),
            sigma_b: Some(CoefficientRow::new(
                "sigma_b",
                fit.params.sigma_b.unwrap_or(0.0),
                se_nat(1),
                level,
            )),
            alpha: None,
            loglik: Some(fit.loglik),
            converged: fit.converged,
            iterations: fit.iterations,
            boundary: fit.boundary,
        }
    }

    pub fn from_gee(fit: &GeeFit, names: &[String], level: f64) -> Self {
        let se = fit.se();
        FitReport {
            estimator: format!("GEE-{}", fit.kind),
            link: "probit".into(),
            ci_level: level,
            coefficient_scale: "marginal".into(),
            coefficients: names
                .iter()
                .zip(&fit.params.coefficients)
                .enumerate()
                .map(|(i, (n, b))| CoefficientRow::new(n, *b, Some(se[i + 1]), level))
                .collect(),
            conditional_coefficients: None,
            p: Some(CoefficientRow::new(
                "p",
                fit.params.p,
                (!fit.p_fixed).then_some(se[0]),
                level,
            )),
            sigma_b: None,
            alpha: fit.params.alpha.as_ref().map(AlphaReport::from),
            loglik: None,
            converged: fit.converged,
            iterations: fit.iterations,
            boundary: fit.boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub estimator: String,
    pub error: String,
    /// Parameters at the point the estimator gave up, when it got that far.
    pub last_iterate: Option<LastIterate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastIterate {
    pub coefficients: Vec<f64>,
    pub p: f64,
    pub sigma_b: Option<f64>,
}

impl FailureReport {
    pub fn new(estimator: &str, err: &ZibError) -> Self {
        let last = match err {
            ZibError::NonConvergence { last, .. } | ZibError::GeeNonConvergence { last, .. } => {
                Some(last.as_ref().clone())
            }
            ZibError::BoundarySolution { last } => Some(last.params.clone()),
            _ => None,
        };
        FailureReport {
            estimator: estimator.to_string(),
            error: err.to_string(),
            last_iterate: last.map(|ps| LastIterate {
                coefficients: ps.coefficients,
                p: ps.p,
                sigma_b: ps.sigma_b,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub n_subjects: usize,
    pub n_observations: usize,
    pub identifiability: IdentifiabilityReport,
    pub reports: Vec<FitReport>,
    pub failures: Vec<FailureReport>,
    pub lrt: Option<LrtResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtDocument {
    pub n_subjects: usize,
    pub n_observations: usize,
    pub lrt: LrtResult,
    pub zero_inflated: FitReport,
    pub glmm: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDocument {
    pub design: SimDesign,
    pub report: SimulationReport,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes `content` to `path`, or standard output when `path` is `None`.
pub fn emit(content: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, content)?,
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn opt(v: Option<f64>, width: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:>width$.4}"),
        _ => format!("{:>width$}", "-"),
    }
}

fn coef_table(out: &mut String, rows: &[CoefficientRow], level: f64) {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(9);
    let pct = (level * 100.0).round();
    let _ = writeln!(
        out,
        "  {:<w$} {:>10} {:>10} {:>22}",
        "parameter", "estimate", "se", format!("{pct}% CI")
    );
    for r in rows {
        let ci = match (r.ci_low, r.ci_high) {
            (Some(a), Some(b)) => format!("({a:.4}, {b:.4})"),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "  {:<w$} {:>10.4} {} {:>22}",
            r.name,
            r.estimate,
            opt(r.se, 10),
            ci
        );
    }
}

pub fn render_fit_text(doc: &FitDocument) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} subjects, {} observations",
        doc.n_subjects, doc.n_observations
    );
    let _ = writeln!(out, "{}", doc.identifiability.message);
    for r in &doc.reports {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{} ({} link, {} coefficients)",
            r.estimator, r.link, r.coefficient_scale
        );
        let mut rows: Vec<CoefficientRow> = Vec::new();
        rows.extend(r.p.clone());
        rows.extend(r.sigma_b.clone());
        rows.extend(r.coefficients.iter().cloned());
        coef_table(&mut out, &rows, r.ci_level);
        if let Some(p) = &r.p {
            let _ = writeln!(out, "  structural-zero fraction 1 - p = {:.4}", 1.0 - p.estimate);
        }
        match &r.alpha {
            Some(AlphaReport::Scalar(a)) => {
                let _ = writeln!(out, "  alpha = {a:.4}");
            }
            Some(AlphaReport::Matrix(m)) => {
                let _ = writeln!(out, "  alpha =");
                for row in m {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:>8.4}")).collect();
                    let _ = writeln!(out, "    {}", cells.join(" "));
                }
            }
            None => {}
        }
        if let Some(l) = r.loglik {
            let _ = writeln!(out, "  log-likelihood = {l:.4}");
        }
        let _ = writeln!(
            out,
            "  converged = {}, iterations = {}, boundary = {}",
            r.converged,
            r.iterations,
            boundary_label(r.boundary)
        );
    }
    for f in &doc.failures {
        let _ = writeln!(out);
        let _ = writeln!(out, "{} failed: {}", f.estimator, f.error);
        if let Some(l) = &f.last_iterate {
            out.push_str(&render_last_iterate(l));
        }
    }
    if let Some(lrt) = &doc.lrt {
        let _ = writeln!(out);
        out.push_str(&render_lrt_text(lrt));
    }
    out
}

pub fn render_last_iterate(l: &LastIterate) -> String {
    let coef: Vec<String> = l.coefficients.iter().map(|v| format!("{v:.6}")).collect();
    let mut s = format!("  last iterate: p = {:.6}", l.p);
    if let Some(sb) = l.sigma_b {
        let _ = write!(s, ", sigma_b = {sb:.6}");
    }
    let _ = writeln!(s, ", coefficients = [{}]", coef.join(", "));
    s
}

fn boundary_label(b: BoundaryFlag) -> &'static str {
    match b {
        BoundaryFlag::None => "none",
        BoundaryFlag::PAtOne => "p_at_one",
        BoundaryFlag::SigmaAtZero => "sigma_at_zero",
    }
}

pub fn render_lrt_text(lrt: &LrtResult) -> String {
    format!(
        "LRT for zero inflation: lambda = {:.4}, p-value = {:.4e} (l1 = {:.4}, l0 = {:.4})\n",
        lrt.lambda, lrt.p_value, lrt.l1, lrt.l0
    )
}

pub fn render_simulation_text(doc: &SimulationDocument) -> String {
    let d = &doc.design;
    let r = &doc.report;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "N = {}, J = {}, sigma_b = {}, p = {}, {} model, {} replications, seed {}",
        d.n_subjects,
        d.n_questions,
        d.sigma_b,
        d.p,
        if d.misspecified { "misspecified" } else { "correct" },
        r.replications,
        d.seed
    );
    let _ = writeln!(
        out,
        "{:<9} {:<12} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "estimator", "parameter", "True", "Mean", "SD", "SE", "COVER"
    );
    for e in &r.estimators {
        for row in &e.rows {
            let _ = writeln!(
                out,
                "{:<9} {:<12} {:>8.3} {:>8.3} {} {} {}",
                e.estimator.to_string(),
                row.parameter,
                row.true_value,
                row.mean,
                opt(row.sd, 8),
                opt(row.mean_se, 8),
                opt(row.cover, 8)
            );
        }
    }
    let _ = writeln!(out);
    for e in &r.estimators {
        let _ = writeln!(
            out,
            "{}: {} converged, {} boundary, {} failed",
            e.estimator, e.n_converged, e.n_boundary, e.n_failed
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{Estimator, EstimatorSummary, ParameterSummary};

    fn sample_fit() -> FitDocument {
        let row = |n: &str, e: f64| CoefficientRow::new(n, e, Some(0.1), 0.95);
        FitDocument {
            n_subjects: 3,
            n_observations: 15,
            identifiability: IdentifiabilityReport {
                continuous_covariate: Some("x".into()),
                distinct_patterns: 15,
                identified: true,
                message: "ok".into(),
            },
            reports: vec![FitReport {
                estimator: "GEE-UN".into(),
                link: "probit".into(),
                ci_level: 0.95,
                coefficient_scale: "marginal".into(),
                coefficients: vec![row("(Intercept)", 0.1), row("x", 0.894)],
                conditional_coefficients: None,
                p: Some(row("p", 0.7)),
                sigma_b: None,
                alpha: Some(AlphaReport::Matrix(vec![vec![1.0, 0.25], vec![0.25, 1.0]])),
                loglik: None,
                converged: true,
                iterations: 7,
                boundary: BoundaryFlag::None,
            }],
            failures: vec![FailureReport {
                estimator: "ML".into(),
                error: "did not converge".into(),
                last_iterate: Some(LastIterate { coefficients: vec![0.0, 1.0], p: 0.6, sigma_b: Some(0.4) }),
            }],
            lrt: Some(LrtResult { lambda: 65.2, p_value: 1e-16, l1: -10.0, l0: -42.6 }),
        }
    }

    #[test]
    fn fit_document_json_round_trip() {
        let doc = sample_fit();
        let back: FitDocument = serde_json::from_str(&to_json(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn ci_bounds_follow_wald() {
        let r = CoefficientRow::new("b", 0.7, Some(0.014), 0.95);
        let (lo, hi) = wald_ci(0.7, 0.014, 0.95);
        assert_eq!((r.ci_low, r.ci_high), (Some(lo), Some(hi)));
        let r = CoefficientRow::new("b", 0.7, Some(f64::NAN), 0.95);
        assert!(r.se.is_none() && r.ci_low.is_none());
    }

    #[test]
    fn fit_text_lists_every_coefficient() {
        let text = render_fit_text(&sample_fit());
        for name in ["(Intercept)", "x", "p ", "GEE-UN", "ML failed", "last iterate", "lambda = 65.2"] {
            assert!(text.contains(name), "{name} missing from\n{text}");
        }
    }

    #[test]
    fn simulation_text_has_one_row_per_parameter() {
        let rows = |names: &[&str]| {
            names
                .iter()
                .map(|n| ParameterSummary {
                    parameter: n.to_string(),
                    true_value: 0.5,
                    mean: 0.5,
                    sd: Some(0.1),
                    mean_se: Some(0.1),
                    cover: Some(0.95),
                })
                .collect::<Vec<_>>()
        };
        let report = SimulationReport {
            replications: 2,
            ci_level: 0.95,
            estimators: vec![
                EstimatorSummary { estimator: Estimator::Ml, n_converged: 2, n_boundary: 0, n_failed: 0, rows: rows(&["p", "sigma_b", "x"]) },
                EstimatorSummary { estimator: Estimator::Glmm, n_converged: 2, n_boundary: 0, n_failed: 0, rows: rows(&["sigma_b", "x"]) },
            ],
        };
        let doc = SimulationDocument { design: SimDesign::preset("table1").unwrap(), report };
        let text = render_simulation_text(&doc);
        let body: Vec<&str> = text.lines().filter(|l| l.starts_with("ML ") || l.starts_with("GLMM ")).collect();
        assert_eq!(body.len(), 5);
        let back: SimulationDocument = serde_json::from_str(&to_json(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("out.json");
        assert!(matches!(emit("{}", Some(&path)), Err(ZibError::Io(_))));
    }
}
