use thiserror::Error;

use crate::data::ParameterSet;
use crate::gee::GeeFit;

pub type Result<T> = std::result::Result<T, ZibError>;

#[derive(Debug, Error)]
pub enum ZibError {
    // dataset validation
    #[error("subject {subject}: outcome value {value} is not 0 or 1")]
    NonBinaryOutcome { subject: String, value: u8 },
    #[error("subject {subject}: {outcomes} outcomes but {rows} design rows")]
    RaggedDesign {
        subject: String,
        outcomes: usize,
        rows: usize,
    },
    #[error("subject {subject}: design row {row} has {found} entries, expected {expected}")]
    RowWidth {
        subject: String,
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("subject {subject}: non-finite covariate in row {row}")]
    NonFiniteCovariate { subject: String, row: usize },
    #[error("subject {subject}: intercept column is not constant 1 in row {row}")]
    BadIntercept { subject: String, row: usize },
    #[error("subject {subject}: empty cluster")]
    EmptyCluster { subject: String },
    #[error("duplicate subject id {subject}")]
    DuplicateSubjectId { subject: String },
    #[error("dataset has no subjects")]
    EmptyDataset,
    #[error("{0} column names given for {1} covariates")]
    ColumnNames(usize, usize),

    // parameters
    #[error("parameter {what} is on the boundary of the parameter space")]
    BoundaryParameter { what: &'static str },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // quadrature
    #[error("quadrature order {0} outside 1..=200")]
    InvalidOrder(usize),
    #[error("integrand is not finite at node {node}")]
    NonFiniteIntegrand { node: f64 },

    // maximum likelihood
    #[error("optimizer did not converge after {iterations} iterations (gradient max-norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last: Box<ParameterSet>,
    },
    #[error("observed information is not positive definite")]
    SingularHessian,

    // estimating equations
    #[error("operation requires the probit link")]
    UnsupportedLink,
    #[error("working correlation is not positive definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NonPDWorkingCorrelation { min_eigenvalue: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unstructured working correlation needs a common cluster size")]
    UnequalClusterSizes,
    #[error("estimating equations did not converge after {iterations} iterations (estimating-function max-norm {ef_norm:.3e})")]
    GeeNonConvergence {
        iterations: usize,
        ef_norm: f64,
        last: Box<ParameterSet>,
    },
    #[error("estimating equations reached the boundary p = 1")]
    BoundarySolution { last: Box<GeeFit> },
    #[error("sandwich bread matrix is singular")]
    SingularBread,

    // inference
    #[error("likelihood ratio statistic {lambda:.6} is negative; the zero-inflated fit is worse than the GLMM")]
    NegativeLambda { lambda: f64 },
    #[error("fits are not comparable: {0}")]
    MismatchedFits(String),

    // simulation
    #[error("no converged replications to summarize")]
    EmptyReplicationSet,
    #[error("invalid simulation design: {0}")]
    InvalidDesign(String),

    // input / output
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("duplicate (subject, question) pair ({subject}, {question})")]
    DuplicateQuestion { subject: String, question: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("configuration: {0}")]
    Config(String),
}
