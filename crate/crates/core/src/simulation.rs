//! Data generators for the correct and misspecified simulation designs,
//! the replication engine and the Mean / SD / SE / COVER summaries.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, SubjectRecord};
use crate::error::{Result, ZibError};
use crate::gee::{fit_gee, GeeOptions, WorkingCorrelationKind};
use crate::inference::wald_ci;
use crate::link::{link_cdf, normal_quantile, LinkKind};
use crate::ml::{fit_glmm, fit_ml, marginalize, BoundaryFlag, MlFit};
use crate::optim::OptimOptions;
use crate::quadrature::{gauss_hermite, DEFAULT_QUAD_POINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Estimator {
    Ml,
    Glmm,
    Gee(WorkingCorrelationKind),
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Ml,
        Estimator::Glmm,
        Estimator::Gee(WorkingCorrelationKind::Mi),
        Estimator::Gee(WorkingCorrelationKind::Ci),
        Estimator::Gee(WorkingCorrelationKind::Me),
        Estimator::Gee(WorkingCorrelationKind::Ce),
        Estimator::Gee(WorkingCorrelationKind::Un),
    ];
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Ml => f.write_str("ML"),
            Estimator::Glmm => f.write_str("GLMM"),
            Estimator::Gee(k) => write!(f, "GEE-{k}"),
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ML" => Ok(Estimator::Ml),
            "GLMM" => Ok(Estimator::Glmm),
            other if other.starts_with("GEE-") => other.parse().map(Estimator::Gee),
            other => Err(format!("unknown estimator '{other}'")),
        }
    }
}

impl Serialize for Estimator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Estimator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_questions() -> usize {
    5
}
fn default_gamma() -> Vec<f64> {
    vec![0.0, 1.0, -0.5, -0.4, 0.2, 0.4]
}
fn default_p() -> f64 {
    0.7
}
fn default_seed() -> u64 {
    1
}
fn default_reps() -> usize {
    200
}
fn default_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}
fn default_quad() -> usize {
    DEFAULT_QUAD_POINTS
}
fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub n_subjects: usize,
    #[serde(default = "default_questions")]
    pub n_questions: usize,
    /// Intercept, subject covariate, then question effects for questions 2..J.
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    pub sigma_b: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub misspecified: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_quad")]
    pub quad_points: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

impl SimDesign {
    /// The four desk-scale designs: correct model with sigma_b 0.5 and 1.5,
    /// then the misspecified model with the same two values.
    pub fn preset(name: &str) -> Result<SimDesign> {
        let (sigma_b, misspecified) = match name {
            "table1" => (0.5, false),
            "table2" => (1.5, false),
            "table3" => (0.5, true),
            "table4" => (1.5, true),
            other => return Err(ZibError::InvalidDesign(format!("unknown preset '{other}'"))),
        };
        Ok(SimDesign {
            n_subjects: 2000,
            n_questions: 5,
            gamma: default_gamma(),
            sigma_b,
            p: 0.7,
            misspecified,
            seed: default_seed(),
            replications: 200,
            estimators: default_estimators(),
            quad_points: DEFAULT_QUAD_POINTS,
            ci_level: 0.95,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ZibError::InvalidDesign(m));
        if self.n_subjects < 2 {
            return bad("n_subjects must be at least 2".into());
        }
        if self.n_questions < 1 {
            return bad("n_questions must be at least 1".into());
        }
        if self.gamma.len() != self.n_questions + 1 {
            return bad(format!(
                "gamma needs {} entries (intercept, x, questions 2..{}), got {}",
                self.n_questions + 1,
                self.n_questions,
                self.gamma.len()
            ));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite()) {
            return bad(format!("sigma_b = {}", self.sigma_b));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p = {}", self.p));
        }
        if self.misspecified && self.n_questions < 4 {
            return bad("misspecified design needs at least 4 questions".into());
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level = {}", self.ci_level));
        }
        gauss_hermite(self.quad_points)?;
        Ok(())
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["(Intercept)".to_string(), "x".to_string()];
        names.extend((2..=self.n_questions).map(|q| format!("q{q}")));
        names
    }

    /// Population-averaged coefficients `gamma / sqrt(1 + sigma_b^2)`.
    pub fn true_marginal_beta(&self) -> Vec<f64> {
        marginalize(&self.gamma, self.sigma_b, None).0
    }
}

/// A generated dataset with the latent draws kept for checks.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub data: ClusteredDataset,
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    pub z: Vec<bool>,
}

struct Stream(ChaCha20Rng);

impl Stream {
    fn new(seed: u64, rep_index: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(rep_index as u64);
        Stream(rng)
    }

    /// Uniform on the open interval (0, 1) with 53-bit resolution.
    fn uniform(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }
}

fn generate_with(design: &SimDesign, rep_index: usize, misspecified: bool) -> Result<SimulatedData> {
    design.validate()?;
    if misspecified && !design.misspecified {
        return Err(ZibError::InvalidDesign(
            "design is not flagged as misspecified".into(),
        ));
    }
    let j = design.n_questions;
    let scale = (1.0 + design.sigma_b * design.sigma_b).sqrt();
    let mut rng = Stream::new(design.seed, rep_index);
    let mut subjects = Vec::with_capacity(design.n_subjects);
    let (mut xs, mut bs, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..design.n_subjects {
        let x = rng.normal();
        let b = design.sigma_b * rng.normal();
        let z = rng.uniform() < design.p;
        let mut rows = Vec::with_capacity(j);
        let mut y = Vec::with_capacity(j);
        for q in 1..=j {
            let mut row = vec![0.0; j + 1];
            row[0] = 1.0;
            row[1] = x;
            if q >= 2 {
                row[q] = 1.0;
            }
            let eta: f64 = row.iter().zip(&design.gamma).map(|(a, g)| a * g).sum();
            let prob = if misspecified && q >= 4 {
                link_cdf(LinkKind::Probit, eta / scale)
            } else {
                link_cdf(LinkKind::Probit, eta + b)
            };
            let u = rng.uniform();
            y.push(u8::from(z && u < prob));
            rows.push(row);
        }
        subjects.push(SubjectRecord::new(format!("s{:05}", i + 1), y, rows));
        xs.push(x);
        bs.push(b);
        zs.push(z);
    }
    let data = ClusteredDataset::new(subjects, design.column_names(), true)?;
    Ok(SimulatedData { data, x: xs, b: bs, z: zs })
}

/// Random-intercept probit data with a latent non-susceptible class.
pub fn generate_correct(design: &SimDesign, rep_index: usize) -> Result<SimulatedData> {
    generate_with(design, rep_index, false)
}

/// As [`generate_correct`] for questions 1..3; later questions have no random
/// intercept and attenuated coefficients, so every question keeps the same
/// marginal mean.
pub fn generate_misspecified(design: &SimDesign, rep_index: usize) -> Result<SimulatedData> {
    generate_with(design, rep_index, true)
}

pub fn generate(design: &SimDesign, rep_index: usize) -> Result<SimulatedData> {
    generate_with(design, rep_index, design.misspecified)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepStatus {
    Converged,
    Boundary,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub parameter: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub rep_index: usize,
    pub estimator: Estimator,
    pub status: RepStatus,
    pub estimates: Vec<EstimateRecord>,
}

fn ml_records(fit: &MlFit, design: &SimDesign, include_p: bool) -> Vec<EstimateRecord> {
    let mut out = Vec::new();
    if include_p {
        out.push(EstimateRecord {
            parameter: "p".into(),
            truth: design.p,
            estimate: fit.params.p,
            se: fit.natural_se(0),
        });
    }
    out.push(EstimateRecord {
        parameter: "sigma_b".into(),
        truth: design.sigma_b,
        estimate: fit.params.sigma_b.unwrap_or(0.0),
        se: fit.natural_se(1),
    });
    let beta = fit
        .marginal_beta
        .clone()
        .unwrap_or_else(|| fit.params.coefficients.clone());
    let se = fit.marginal_se();
    for (c, ((name, truth), est)) in design
        .column_names()
        .into_iter()
        .zip(design.true_marginal_beta())
        .zip(beta)
        .enumerate()
    {
        out.push(EstimateRecord {
            parameter: name,
            truth,
            estimate: est,
            se: se.as_ref().map(|s| s[c]),
        });
    }
    out
}

/// Generates replication `rep_index` and runs every requested estimator.
pub fn run_replication(design: &SimDesign, rep_index: usize) -> Result<Vec<ReplicationRecord>> {
    let sim = generate(design, rep_index)?;
    let data = &sim.data;
    let rule = gauss_hermite(design.quad_points)?;
    let optim = OptimOptions::default();
    let record = |estimator, status, estimates| ReplicationRecord {
        rep_index,
        estimator,
        status,
        estimates,
    };
    let mut out = Vec::with_capacity(design.estimators.len());
    for &est in &design.estimators {
        let rec = match est {
            Estimator::Ml | Estimator::Glmm => {
                let fit = if est == Estimator::Ml {
                    fit_ml(data, LinkKind::Probit, &rule, None, &optim)
                } else {
                    fit_glmm(data, LinkKind::Probit, &rule, None, &optim)
                };
                match fit {
                    Ok(f) => {
                        let status = if f.boundary == BoundaryFlag::None {
                            RepStatus::Converged
                        } else {
                            RepStatus::Boundary
                        };
                        record(est, status, ml_records(&f, design, est == Estimator::Ml))
                    }
                    Err(_) => record(est, RepStatus::Failed, Vec::new()),
                }
            }
            Estimator::Gee(kind) => {
                match fit_gee(data, kind, LinkKind::Probit, None, &GeeOptions::default()) {
                    Ok(f) => {
                        let se = f.se();
                        let mut recs = vec![EstimateRecord {
                            parameter: "p".into(),
                            truth: design.p,
                            estimate: f.params.p,
                            se: Some(se[0]),
                        }];
                        for (c, ((name, truth), est)) in design
                            .column_names()
                            .into_iter()
                            .zip(design.true_marginal_beta())
                            .zip(&f.params.coefficients)
                            .enumerate()
                        {
                            recs.push(EstimateRecord {
                                parameter: name,
                                truth,
                                estimate: *est,
                                se: Some(se[c + 1]),
                            });
                        }
                        record(est, RepStatus::Converged, recs)
                    }
                    Err(ZibError::BoundarySolution { .. }) => {
                        record(est, RepStatus::Boundary, Vec::new())
                    }
                    Err(_) => record(est, RepStatus::Failed, Vec::new()),
                }
            }
        };
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub true_value: f64,
    pub mean: f64,
    /// Sample SD; absent with a single replication.
    pub sd: Option<f64>,
    pub mean_se: Option<f64>,
    pub cover: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub n_converged: usize,
    pub n_boundary: usize,
    pub n_failed: usize,
    pub rows: Vec<ParameterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replications: usize,
    pub ci_level: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl SimulationReport {
    pub fn get(&self, estimator: Estimator, parameter: &str) -> Option<&ParameterSummary> {
        self.estimators
            .iter()
            .find(|e| e.estimator == estimator)?
            .rows
            .iter()
            .find(|r| r.parameter == parameter)
    }

    pub fn block(&self, estimator: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == estimator)
    }
}

/// Aggregates replication records. Only converged, non-boundary records
/// enter the moments; coverage uses the records that carry a standard error.
pub fn summarize(records: &[ReplicationRecord], ci_level: f64) -> Result<SimulationReport> {
    if !records.iter().any(|r| r.status == RepStatus::Converged) {
        return Err(ZibError::EmptyReplicationSet);
    }
    let mut sorted: Vec<&ReplicationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.estimator, r.rep_index));
    let mut groups: BTreeMap<Estimator, Vec<&ReplicationRecord>> = BTreeMap::new();
    for r in sorted {
        groups.entry(r.estimator).or_default().push(r);
    }
    let replications = records
        .iter()
        .map(|r| r.rep_index)
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    let mut estimators = Vec::new();
    for (estimator, recs) in groups {
        let count = |s| recs.iter().filter(|r| r.status == s).count();
        let good: Vec<_> = recs.iter().filter(|r| r.status == RepStatus::Converged).collect();
        let mut rows = Vec::new();
        if let Some(first) = good.first() {
            for (idx, proto) in first.estimates.iter().enumerate() {
                let vals: Vec<&EstimateRecord> = good.iter().map(|r| &r.estimates[idx]).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().map(|v| v.estimate).sum::<f64>() / n;
                let sd = (vals.len() > 1).then(|| {
                    (vals.iter().map(|v| (v.estimate - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                });
                let with_se: Vec<(f64, f64)> = vals
                    .iter()
                    .filter_map(|v| v.se.filter(|s| s.is_finite()).map(|s| (v.estimate, s)))
                    .collect();
                let (mean_se, cover) = if with_se.is_empty() {
                    (None, None)
                } else {
                    let m = with_se.len() as f64;
                    let mean_se = with_se.iter().map(|(_, s)| s).sum::<f64>() / m;
                    let hits = with_se
                        .iter()
                        .filter(|(e, s)| {
                            let (lo, hi) = wald_ci(*e, *s, ci_level);
                            lo <= proto.truth && proto.truth <= hi
                        })
                        .count();
                    (Some(mean_se), Some(hits as f64 / m))
                };
                rows.push(ParameterSummary {
                    parameter: proto.parameter.clone(),
                    true_value: proto.truth,
                    mean,
                    sd,
                    mean_se,
                    cover,
                });
            }
        }
        estimators.push(EstimatorSummary {
            estimator,
            n_converged: good.len(),
            n_boundary: count(RepStatus::Boundary),
            n_failed: count(RepStatus::Failed),
            rows,
        });
    }
    Ok(SimulationReport {
        replications,
        ci_level,
        estimators,
    })
}

/// Runs all replications of `design` on `threads` worker threads. Results do
/// not depend on the thread count.
pub fn run_replications(design: &SimDesign, threads: usize) -> Result<SimulationReport> {
    design.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ZibError::InvalidDesign(format!("thread pool: {e}")))?;
    let per_rep: Vec<Result<Vec<ReplicationRecord>>> = pool.install(|| {
        (0..design.replications)
            .into_par_iter()
            .map(|r| run_replication(design, r))
            .collect()
    });
    let mut records = Vec::new();
    for r in per_rep {
        records.extend(r?);
    }
    summarize(&records, design.ci_level)
}
