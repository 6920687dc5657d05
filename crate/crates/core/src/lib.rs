//! Zero-inflated clustered binary regression.
//!
//! A latent class `Z ~ Bernoulli(p)` separates subjects who can only answer
//! zero from those whose outcomes follow a probit random-intercept model.
//! The crate fits the model by maximum likelihood with Gauss–Hermite
//! quadrature, fits marginal estimating equations with five working
//! correlations, and runs the simulation designs used to compare them.

pub mod cli;
pub mod data;
pub mod error;
pub mod gee;
pub mod inference;
pub mod io;
pub mod link;
pub mod ml;
pub mod numeric;
pub mod optim;
pub mod quadrature;
pub mod report;
pub mod simulation;

pub use data::{
    pack_params, unpack_params, validate_dataset, Association, ClusteredDataset, PackMode,
    ParameterSet, SubjectRecord, UnconstrainedParams,
};
pub use error::{Result, ZibError};
pub use gee::{fit_gee, sandwich_vcov, GeeFit, GeeOptions, WorkingCorrelationKind};
pub use inference::{identifiability_check, lrt_zero_inflation, wald_ci, LrtResult};
pub use link::LinkKind;
pub use ml::{fit_glmm, fit_ml, marginalize, observed_information, subject_loglik, total_loglik, BoundaryFlag, MlFit};
pub use optim::OptimOptions;
pub use quadrature::{gauss_hermite, QuadratureRule};
pub use simulation::{run_replications, summarize, Estimator, SimDesign, SimulationReport};
pub use io::{read_long_csv, write_long_csv, LongSchema};
pub use report::{FitDocument, FitReport, SimulationDocument};
