//! Clustered binary datasets and parameter containers.

use std::collections::HashSet;

use nalgebra::DMatrix;

use crate::error::{Result, ZibError};
use crate::numeric::{expit, logit};

/// One subject (cluster): a binary response vector and its design rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub y: Vec<u8>,
    pub x: Vec<Vec<f64>>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, y: Vec<u8>, x: Vec<Vec<f64>>) -> Self {
        Self { id: id.into(), y, x }
    }

    pub fn cluster_size(&self) -> usize {
        self.y.len()
    }

    pub fn is_all_zero(&self) -> bool {
        self.y.iter().all(|&v| v == 0)
    }

    /// Linear predictor `x_j' coef` for every row.
    pub fn linear_predictor(&self, coef: &[f64]) -> Vec<f64> {
        self.x
            .iter()
            .map(|row| row.iter().zip(coef).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Validated collection of subjects sharing one design layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    subjects: Vec<SubjectRecord>,
    n_covariates: usize,
    column_names: Vec<String>,
    intercept: bool,
}

impl ClusteredDataset {
    /// Builds and validates a dataset. When `intercept` is set the first
    /// design column must be the constant 1.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        column_names: Vec<String>,
        intercept: bool,
    ) -> Result<Self> {
        let n_covariates = column_names.len();
        let ds = Self {
            subjects,
            n_covariates,
            column_names,
            intercept,
        };
        validate_dataset(ds)
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.y.len()).sum()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    /// Common cluster size, if every subject has the same number of outcomes.
    pub fn common_cluster_size(&self) -> Option<usize> {
        let first = self.subjects.first()?.y.len();
        self.subjects
            .iter()
            .all(|s| s.y.len() == first)
            .then_some(first)
    }

    pub fn all_zero_fraction(&self) -> f64 {
        let zeros = self.subjects.iter().filter(|s| s.is_all_zero()).count();
        zeros as f64 / self.subjects.len() as f64
    }

    /// Same design, subjects replaced (used for resampling and duplication).
    pub fn with_subjects(&self, subjects: Vec<SubjectRecord>) -> Result<Self> {
        Self::new(subjects, self.column_names.clone(), self.intercept)
    }
}

/// Checks every dataset invariant and returns the dataset unchanged.
pub fn validate_dataset(raw: ClusteredDataset) -> Result<ClusteredDataset> {
    if raw.subjects.is_empty() {
        return Err(ZibError::EmptyDataset);
    }
    if raw.column_names.len() != raw.n_covariates {
        return Err(ZibError::ColumnNames(
            raw.column_names.len(),
            raw.n_covariates,
        ));
    }
    let mut seen = HashSet::with_capacity(raw.subjects.len());
    for s in &raw.subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(ZibError::DuplicateSubjectId {
                subject: s.id.clone(),
            });
        }
        if s.y.is_empty() {
            return Err(ZibError::EmptyCluster {
                subject: s.id.clone(),
            });
        }
        if let Some(&value) = s.y.iter().find(|&&v| v > 1) {
            return Err(ZibError::NonBinaryOutcome {
                subject: s.id.clone(),
                value,
            });
        }
        if s.x.len() != s.y.len() {
            return Err(ZibError::RaggedDesign {
                subject: s.id.clone(),
                outcomes: s.y.len(),
                rows: s.x.len(),
            });
        }
        for (j, row) in s.x.iter().enumerate() {
            if row.len() != raw.n_covariates {
                return Err(ZibError::RowWidth {
                    subject: s.id.clone(),
                    row: j,
                    found: row.len(),
                    expected: raw.n_covariates,
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ZibError::NonFiniteCovariate {
                    subject: s.id.clone(),
                    row: j,
                });
            }
            if raw.intercept && row[0] != 1.0 {
                return Err(ZibError::BadIntercept {
                    subject: s.id.clone(),
                    row: j,
                });
            }
        }
    }
    Ok(raw)
}

/// Association parameters of a working correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum Association {
    /// Scalar exchangeable correlation (ME, CE).
    Exchangeable(f64),
    /// Symmetric J x J matrix with unit diagonal (UN).
    Unstructured(DMatrix<f64>),
}

/// Model parameters on the natural scale.
///
/// `coefficients` holds the conditional gamma for the likelihood models and
/// the marginal beta for the estimating equations.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub coefficients: Vec<f64>,
    pub sigma_b: Option<f64>,
    /// Pr(Z = 1), prevalence of the susceptible class.
    pub p: f64,
    pub alpha: Option<Association>,
}

impl ParameterSet {
    pub fn ml(coefficients: Vec<f64>, sigma_b: f64, p: f64) -> Self {
        Self {
            coefficients,
            sigma_b: Some(sigma_b),
            p,
            alpha: None,
        }
    }

    pub fn gee(coefficients: Vec<f64>, p: f64) -> Self {
        Self {
            coefficients,
            sigma_b: None,
            p,
            alpha: None,
        }
    }

    /// Checks the natural-scale invariants (boundary values allowed).
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(ZibError::InvalidParameter(format!(
                "p = {} outside [0, 1]",
                self.p
            )));
        }
        if let Some(s) = self.sigma_b {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(ZibError::InvalidParameter(format!("sigma_b = {s}")));
            }
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(ZibError::InvalidParameter(
                "non-finite coefficient".into(),
            ));
        }
        match &self.alpha {
            Some(Association::Exchangeable(a)) if !(a.abs() < 1.0) => Err(
                ZibError::InvalidParameter(format!("exchangeable alpha = {a}")),
            ),
            Some(Association::Unstructured(m)) => {
                let ok = m.is_square()
                    && (0..m.nrows()).all(|i| {
                        (m[(i, i)] - 1.0).abs() < 1e-12
                            && (0..m.ncols()).all(|j| {
                                (m[(i, j)] - m[(j, i)]).abs() < 1e-12 && m[(i, j)].abs() <= 1.0
                            })
                    });
                if ok {
                    Ok(())
                } else {
                    Err(ZibError::InvalidParameter(
                        "unstructured alpha must be symmetric with unit diagonal".into(),
                    ))
                }
            }
            _ => Ok(()),
        }
    }

    /// Population-averaged coefficients gamma / sqrt(1 + sigma_b^2); identity
    /// when no random intercept is present.
    pub fn marginal_coefficients(&self) -> Vec<f64> {
        let scale = (1.0 + self.sigma_b.unwrap_or(0.0).powi(2)).sqrt();
        self.coefficients.iter().map(|g| g / scale).collect()
    }
}

/// Which estimator's parameter packing to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackMode {
    /// (logit p, log sigma_b, gamma)
    Ml,
    /// (logit p, beta)
    Gee,
}

/// Unconstrained optimization vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    pub theta: Vec<f64>,
    pub mode: PackMode,
}

pub fn pack_params(params: &ParameterSet, mode: PackMode) -> Result<UnconstrainedParams> {
    params.check()?;
    if params.p <= 0.0 || params.p >= 1.0 {
        return Err(ZibError::BoundaryParameter { what: "p" });
    }
    let mut theta = Vec::with_capacity(params.coefficients.len() + 2);
    theta.push(logit(params.p));
    if mode == PackMode::Ml {
        let sigma = params
            .sigma_b
            .ok_or_else(|| ZibError::InvalidParameter("sigma_b required".into()))?;
        if sigma <= 0.0 {
            return Err(ZibError::BoundaryParameter { what: "sigma_b" });
        }
        theta.push(sigma.ln());
    }
    theta.extend_from_slice(&params.coefficients);
    Ok(UnconstrainedParams { theta, mode })
}

pub fn unpack_params(packed: &UnconstrainedParams) -> ParameterSet {
    let theta = &packed.theta;
    let p = expit(theta[0]);
    match packed.mode {
        PackMode::Ml => ParameterSet::ml(theta[2..].to_vec(), theta[1].exp(), p),
        PackMode::Gee => ParameterSet::gee(theta[1..].to_vec(), p),
    }
}
