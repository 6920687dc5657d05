//! Command-line entry points: `fit`, `lrt` and `simulate`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::ClusteredDataset;
use crate::error::{Result, ZibError};
use crate::gee::{fit_gee, GeeOptions, WorkingCorrelationKind};
use crate::inference::{identifiability_check, lrt_workflow};
use crate::io::{parse_interactions, read_long_csv, write_long_csv, LongSchema};
use crate::link::LinkKind;
use crate::ml::{fit_glmm, fit_ml, MlFit};
use crate::optim::OptimOptions;
use crate::quadrature::{gauss_hermite, MAX_QUAD_POINTS};
use crate::report::{
    emit, render_fit_text, render_lrt_text, render_simulation_text, to_json, FailureReport,
    FitDocument, FitReport, LrtDocument, SimulationDocument,
};
use crate::simulation::{generate, run_replications, SimDesign};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ESTIMATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "zib", version, about = "Zero-inflated clustered binary regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one or all estimators to a long-format CSV file.
    Fit(FitArgs),
    /// Likelihood-ratio test of zero inflation against the plain GLMM.
    Lrt(LrtArgs),
    /// Run a Monte Carlo design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    id: String,
    #[arg(long)]
    question: String,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Product terms, e.g. `age:q2,age:q3`.
    #[arg(long)]
    interactions: Option<String>,
    #[arg(long)]
    no_intercept: bool,
}

impl DataArgs {
    fn schema(&self) -> Result<LongSchema> {
        Ok(LongSchema {
            outcome: self.outcome.clone(),
            id: self.id.clone(),
            question: self.question.clone(),
            covariates: self.covariates.iter().filter(|c| !c.is_empty()).cloned().collect(),
            interactions: match &self.interactions {
                Some(spec) => parse_interactions(spec)?,
                None => Vec::new(),
            },
            intercept: !self.no_intercept,
        })
    }

    fn load(&self) -> Result<ClusteredDataset> {
        read_long_csv(&self.data, &self.schema()?)
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 20, value_parser = parse_quad_points)]
    quad_points: usize,
    #[arg(long, default_value = "probit", value_parser = parse_link)]
    link: LinkKind,
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    ci_level: f64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    estimator: EstimatorChoice,
    #[command(flatten)]
    model: ModelArgs,
    /// Add the zero-inflation likelihood-ratio test.
    #[arg(long)]
    lrt: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct LrtArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// TOML design file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    design: Option<PathBuf>,
    #[arg(long, value_parser = ["table1", "table2", "table3", "table4"])]
    preset: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "ZIB_THREADS")]
    threads: Option<usize>,
    /// Write the dataset of one replication as long CSV and stop.
    #[arg(long)]
    emit_dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "emit_dataset")]
    rep_index: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorChoice {
    Ml,
    Glmm,
    GeeMi,
    GeeCi,
    GeeMe,
    GeeCe,
    GeeUn,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Job {
    Ml,
    Glmm,
    Gee(WorkingCorrelationKind),
}

impl EstimatorChoice {
    fn jobs(self) -> Vec<Job> {
        use WorkingCorrelationKind as W;
        match self {
            EstimatorChoice::Ml => vec![Job::Ml],
            EstimatorChoice::Glmm => vec![Job::Glmm],
            EstimatorChoice::GeeMi => vec![Job::Gee(W::Mi)],
            EstimatorChoice::GeeCi => vec![Job::Gee(W::Ci)],
            EstimatorChoice::GeeMe => vec![Job::Gee(W::Me)],
            EstimatorChoice::GeeCe => vec![Job::Gee(W::Ce)],
            EstimatorChoice::GeeUn => vec![Job::Gee(W::Un)],
            EstimatorChoice::All => {
                let mut v = vec![Job::Ml, Job::Glmm];
                v.extend(W::ALL.iter().map(|&k| Job::Gee(k)));
                v
            }
        }
    }
}

impl Job {
    fn label(self) -> String {
        match self {
            Job::Ml => "ML".into(),
            Job::Glmm => "GLMM".into(),
            Job::Gee(k) => format!("GEE-{k}"),
        }
    }
}

fn parse_quad_points(s: &str) -> std::result::Result<usize, String> {
    let q: usize = s.parse().map_err(|_| format!("'{s}' is not an integer"))?;
    if (1..=MAX_QUAD_POINTS).contains(&q) {
        Ok(q)
    } else {
        Err(format!("must be between 1 and {MAX_QUAD_POINTS}"))
    }
}

fn parse_link(s: &str) -> std::result::Result<LinkKind, String> {
    match s {
        "probit" => Ok(LinkKind::Probit),
        "logit" => Ok(LinkKind::Logit),
        _ => Err(format!("unknown link '{s}' (probit or logit)")),
    }
}

fn parse_level(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err("must lie strictly between 0 and 1".into())
    }
}

/// Whether an error comes from estimation rather than from input or usage.
fn is_estimation_failure(e: &ZibError) -> bool {
    matches!(
        e,
        ZibError::NonConvergence { .. }
            | ZibError::SingularHessian
            | ZibError::BoundaryParameter { .. }
            | ZibError::NonFiniteIntegrand { .. }
            | ZibError::NonPDWorkingCorrelation { .. }
            | ZibError::InsufficientData(_)
            | ZibError::UnequalClusterSizes
            | ZibError::GeeNonConvergence { .. }
            | ZibError::BoundarySolution { .. }
            | ZibError::SingularBread
            | ZibError::NegativeLambda { .. }
            | ZibError::MismatchedFits(_)
            | ZibError::EmptyReplicationSet
    )
}

fn report_error(context: &str, e: &ZibError) -> i32 {
    eprintln!("error: {e}");
    if is_estimation_failure(e) {
        if let Some(l) = FailureReport::new(context, e).last_iterate {
            eprint!("{}", crate::report::render_last_iterate(&l));
        }
        EXIT_ESTIMATION
    } else {
        EXIT_USAGE
    }
}

fn write_out<T: serde::Serialize>(
    out: &OutputArgs,
    doc: &T,
    text: impl FnOnce(&T) -> String,
) -> Result<()> {
    let body = match out.format {
        Format::Json => to_json(doc)?,
        Format::Text => text(doc),
    };
    emit(&body, out.output.as_deref())
}

fn run_fit(args: &FitArgs) -> Result<i32> {
    let jobs = args.estimator.jobs();
    if args.model.link != LinkKind::Probit && jobs.iter().any(|j| matches!(j, Job::Gee(_))) {
        return Err(ZibError::UnsupportedLink);
    }
    let data = args.data.load()?;
    let rule = gauss_hermite(args.model.quad_points)?;
    let optim = OptimOptions::default();
    let names = data.column_names().to_vec();
    let level = args.model.ci_level;
    let link = args.model.link;

    let mut doc = FitDocument {
        n_subjects: data.n_subjects(),
        n_observations: data.n_observations(),
        identifiability: identifiability_check(&data),
        reports: Vec::new(),
        failures: Vec::new(),
        lrt: None,
    };

    let mut ml: Option<MlFit> = None;
    let mut glmm: Option<MlFit> = None;
    if args.lrt {
        match lrt_workflow(&data, link, &rule, &optim) {
            Ok((zi, g, lrt)) => {
                doc.lrt = Some(lrt);
                ml = Some(zi);
                glmm = Some(g);
            }
            Err(e) => doc.failures.push(FailureReport::new("LRT", &e)),
        }
    }

    for job in jobs {
        let label = job.label();
        let result = match job {
            Job::Ml => match ml.take() {
                Some(f) => Ok(f),
                None => fit_ml(&data, link, &rule, None, &optim),
            }
            .map(|f| FitReport::from_ml(&f, &names, level)),
            Job::Glmm => match glmm.take() {
                Some(f) => Ok(f),
                None => fit_glmm(&data, link, &rule, None, &optim),
            }
            .map(|f| FitReport::from_ml(&f, &names, level)),
            Job::Gee(kind) => fit_gee(&data, kind, link, None, &GeeOptions::default())
                .map(|f| FitReport::from_gee(&f, &names, level)),
        };
        match result {
            Ok(r) => doc.reports.push(r),
            Err(e) => doc.failures.push(FailureReport::new(&label, &e)),
        }
    }

    for f in &doc.failures {
        eprintln!("error: {} failed: {}", f.estimator, f.error);
        if let Some(l) = &f.last_iterate {
            eprint!("{}", crate::report::render_last_iterate(l));
        }
    }
    write_out(&args.out, &doc, render_fit_text)?;
    Ok(if doc.failures.is_empty() { EXIT_OK } else { EXIT_ESTIMATION })
}

fn run_lrt(args: &LrtArgs) -> Result<i32> {
    let data = args.data.load()?;
    let rule = gauss_hermite(args.model.quad_points)?;
    let (zi, glmm, lrt) = lrt_workflow(&data, args.model.link, &rule, &OptimOptions::default())?;
    let names = data.column_names();
    let doc = LrtDocument {
        n_subjects: data.n_subjects(),
        n_observations: data.n_observations(),
        lrt,
        zero_inflated: FitReport::from_ml(&zi, names, args.model.ci_level),
        glmm: FitReport::from_ml(&glmm, names, args.model.ci_level),
    };
    write_out(&args.out, &doc, |d| render_lrt_text(&d.lrt))?;
    Ok(EXIT_OK)
}

fn load_design(path: &Path) -> Result<SimDesign> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| ZibError::Config(format!("{}: {e}", path.display())))
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run_simulate(args: &SimulateArgs) -> Result<i32> {
    let mut design = match (&args.design, &args.preset) {
        (Some(path), _) => load_design(path)?,
        (None, Some(name)) => SimDesign::preset(name)?,
        (None, None) => return Err(ZibError::Config("--design or --preset is required".into())),
    };
    if let Some(r) = args.reps {
        design.replications = r;
    }
    if let Some(s) = args.seed {
        design.seed = s;
    }
    design.validate()?;

    if let Some(path) = &args.emit_dataset {
        let sim = generate(&design, args.rep_index)?;
        let file = std::fs::File::create(path)?;
        write_long_csv(&sim.data, std::io::BufWriter::new(file))?;
        return Ok(EXIT_OK);
    }

    let threads = args.threads.filter(|&t| t > 0).unwrap_or_else(default_threads);
    let report = run_replications(&design, threads)?;
    let doc = SimulationDocument { design, report };
    write_out(&args.out, &doc, render_simulation_text)?;
    Ok(EXIT_OK)
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (context, outcome) = match &cli.command {
        Command::Fit(a) => ("fit", run_fit(a)),
        Command::Lrt(a) => ("lrt", run_lrt(a)),
        Command::Simulate(a) => ("simulate", run_simulate(a)),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => report_error(context, &e),
    }
}
