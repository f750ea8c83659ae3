//! Command-line front end: estimation, confidence intervals, distribution
//! queries, Monte Carlo experiments, and a numerical self-test.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use elppi::auxiliary::{build_aux, AuxMatrix, AuxSpec};
use elppi::dist::{build_cdf, cdf_band, quantile_ci, CdfBand, QuantileCI, VarianceContext};
use elppi::error::Error;
use elppi::estimator::{fit, supervised_init, ELFit, FitMode};
use elppi::harness::{result_csv, run_experiment, ExperimentSpec, MetricRow};
use elppi::infer::{inference_report, InferenceReport, LrSet};
use elppi::model::{load_dataset, FitConfig, PPIDataset};

mod selftest;

#[derive(Parser)]
#[command(
    name = "elppi",
    version,
    about = "Empirical-likelihood prediction-powered inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Overrides the seed from the config or spec file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replication-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format; defaults to json for fit/ci and csv elsewhere.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the estimator and report plug-in standard errors.
    Fit(DataArgs),
    /// Fit plus confidence sets: Wald intervals and, for scalar targets,
    /// the ratio-inverted interval.
    Ci(CiArgs),
    /// Calibrated distribution estimate with CDF and quantile queries.
    Dist(DistArgs),
    /// Run a Monte Carlo experiment described by a JSON spec.
    Simulate(SimArgs),
    /// Run the built-in numerical invariant checks.
    Selftest,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Fit configuration JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hypothesized parameter, comma-separated coordinates; adds the
    /// ratio statistic at this point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta0: Option<Vec<f64>>,
}

#[derive(Args)]
struct DistArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Response values at which to report the CDF with its Wald band.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    at: Option<Vec<f64>>,
    /// Probability levels at which to report quantiles with intervals.
    #[arg(long, value_delimiter = ',')]
    quantile: Option<Vec<f64>>,
}

#[derive(Args)]
struct SimArgs {
    /// Experiment spec JSON.
    #[arg(long)]
    spec: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            // Help and version requests are not errors.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Infeasible(_) | Error::NoConvergence(_) | Error::Numerical(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let output = match &cli.command {
        Cmd::Fit(args) => fit_cmd(args, &cli, false)?,
        Cmd::Ci(args) => fit_cmd(&args.data, &cli, true)?,
        Cmd::Dist(args) => dist_cmd(args, &cli)?,
        Cmd::Simulate(args) => return simulate_cmd(args, &cli),
        Cmd::Selftest => return selftest::run(),
    };
    emit(&cli.out, &output)
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, content)?,
        None => print!("{content}"),
    }
    Ok(())
}

fn load_inputs(args: &DataArgs, cli: &Cli) -> Result<(FitConfig, PPIDataset), Error> {
    let raw = fs::read_to_string(&args.config)?;
    let mut config: FitConfig = serde_json::from_str(&raw)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let dataset = load_dataset(&args.data, &config.schema)?;
    Ok((config, dataset))
}

/// Rebuilds the auxiliary matrix the fit actually used: the full matrix on
/// the prediction-powered routes, none after a supervised fallback.
fn aux_for_fit(
    config: &FitConfig,
    dataset: &PPIDataset,
    fitted: &ELFit,
) -> Result<AuxMatrix, Error> {
    match fitted.mode {
        FitMode::TwoStep | FitMode::FullProfile => {
            let problem = config.to_problem()?;
            let pilot = supervised_init(dataset, &problem.model, &problem.controls)?;
            build_aux(
                dataset,
                &problem.model,
                &config.aux,
                Some(&pilot),
                config.seed,
            )
        }
        _ => Ok(AuxMatrix::empty(dataset.n())),
    }
}

fn mode_name(mode: FitMode) -> &'static str {
    match mode {
        FitMode::TwoStep => "two_step",
        FitMode::FullProfile => "full_profile",
        FitMode::SupervisedEl => "supervised_el",
        FitMode::SupervisedPlain => "supervised_plain",
    }
}

#[derive(Serialize)]
struct FitSummary<'a> {
    theta_hat: Vec<f64>,
    log_el: f64,
    mode: &'static str,
    converged: bool,
    multipliers: Vec<f64>,
    notes: &'a [String],
}

#[derive(Serialize)]
struct FitOutput<'a> {
    fit: FitSummary<'a>,
    report: &'a InferenceReport,
}

fn fit_cmd(args: &DataArgs, cli: &Cli, with_lr: bool) -> Result<String, Error> {
    let (config, dataset) = load_inputs(args, cli)?;
    let problem = config.to_problem()?;
    let fitted = fit(&problem, &dataset)?;
    let aux = aux_for_fit(&config, &dataset, &fitted)?;
    let theta0 = match &cli.command {
        Cmd::Ci(ci) => ci
            .theta0
            .as_ref()
            .map(|v| DVector::from_column_slice(v.as_slice())),
        _ => None,
    };
    let report = inference_report(
        &dataset,
        &problem.model,
        &aux,
        &fitted,
        problem.alpha,
        config.seed,
        theta0.as_ref(),
        &problem.controls,
    )?;
    match cli.format.unwrap_or(Format::Json) {
        Format::Json => {
            let out = FitOutput {
                fit: FitSummary {
                    theta_hat: fitted.theta_hat.iter().cloned().collect(),
                    log_el: fitted.log_el,
                    mode: mode_name(fitted.mode),
                    converged: fitted.converged,
                    multipliers: fitted.multipliers.iter().cloned().collect(),
                    notes: &fitted.notes,
                },
                report: &report,
            };
            Ok(serde_json::to_string_pretty(&out)? + "\n")
        }
        Format::Csv => {
            let mut s = if with_lr {
                String::from("coord,estimate,se,wald_lo,wald_hi,lr_lo,lr_hi\n")
            } else {
                String::from("coord,estimate,se,wald_lo,wald_hi\n")
            };
            for (k, w) in report.wald.iter().enumerate() {
                write!(s, "{},{},{},{},{}", k, w.estimate, w.se, w.lo, w.hi).unwrap();
                if with_lr {
                    match (&report.lr_interval, k) {
                        (Some(LrSet::Interval(lr)), 0) => {
                            let lo = if lr.lo_unbounded { String::from("-inf") } else { format!("{}", lr.lo) };
                            let hi = if lr.hi_unbounded { String::from("inf") } else { format!("{}", lr.hi) };
                            write!(s, ",{lo},{hi}").unwrap();
                        }
                        _ => s.push_str(",,"),
                    }
                }
                s.push('\n');
            }
            Ok(s)
        }
    }
}

#[derive(Serialize)]
struct CdfQuery {
    y: f64,
    #[serde(flatten)]
    band: CdfBand,
}

#[derive(Serialize)]
struct QuantileQuery {
    tau: f64,
    #[serde(flatten)]
    ci: QuantileCI,
}

#[derive(Serialize)]
struct DistOutput {
    ecdf_fallback: bool,
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    cdf: Vec<CdfQuery>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    quantiles: Vec<QuantileQuery>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    support: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    weights: Vec<f64>,
}

fn dist_cmd(args: &DistArgs, cli: &Cli) -> Result<String, Error> {
    let (config, dataset) = load_inputs(&args.data, cli)?;
    let problem = config.to_problem()?;
    let pilot = match &config.aux {
        AuxSpec::None | AuxSpec::FixedBasis { .. } => None,
        AuxSpec::Crossfit { .. } => Some(supervised_init(&dataset, &problem.model, &problem.controls)?),
    };
    let aux = build_aux(
        &dataset,
        &problem.model,
        &config.aux,
        pilot.as_ref(),
        config.seed,
    )?;
    let cdf = build_cdf(&dataset, &aux, &problem.controls)?;
    // The marginal distribution target needs no score block.
    let ctx = VarianceContext::new(&dataset, None, None, &aux)?;

    let cdf_rows: Vec<CdfQuery> = args
        .at
        .iter()
        .flatten()
        .map(|&y| CdfQuery {
            y,
            band: cdf_band(&cdf, &ctx, &dataset, y, None, problem.alpha),
        })
        .collect();
    let q_rows: Vec<QuantileQuery> = args
        .quantile
        .iter()
        .flatten()
        .map(|&tau| {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "quantile level {tau} outside (0,1)"
                )));
            }
            Ok(QuantileQuery {
                tau,
                ci: quantile_ci(&cdf, &ctx, &dataset, tau, problem.alpha),
            })
        })
        .collect::<Result<_, Error>>()?;
    let table_only = cdf_rows.is_empty() && q_rows.is_empty();

    match cli.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            if table_only {
                let mut buf = Vec::new();
                cdf.write_csv(&mut buf)?;
                return Ok(String::from_utf8(buf)
                    .map_err(|e| Error::Numerical(format!("non-utf8 output: {e}")))?);
            }
            let mut s = String::from("kind,query,estimate,lo,hi,flagged\n");
            for row in &cdf_rows {
                writeln!(
                    s,
                    "cdf,{},{},{},{},{}",
                    row.y, row.band.f_hat, row.band.lo, row.band.hi, row.band.degenerate
                )
                .unwrap();
            }
            for row in &q_rows {
                writeln!(
                    s,
                    "quantile,{},{},{},{},{}",
                    row.tau, row.ci.estimate, row.ci.lo, row.ci.hi, row.ci.fallback
                )
                .unwrap();
            }
            Ok(s)
        }
        Format::Json => {
            let out = DistOutput {
                ecdf_fallback: cdf.ecdf_fallback,
                warnings: cdf.warnings.clone(),
                cdf: cdf_rows,
                quantiles: q_rows,
                support: if table_only { cdf.support().to_vec() } else { Vec::new() },
                weights: if table_only { cdf.weights().to_vec() } else { Vec::new() },
            };
            Ok(serde_json::to_string_pretty(&out)? + "\n")
        }
    }
}

#[derive(Serialize)]
struct SimSummary<'a> {
    scenario: &'static str,
    n: usize,
    m: usize,
    replications: usize,
    methods: Vec<&'static str>,
    seed: u64,
    n_failures: usize,
    metrics: &'a [MetricRow],
}

fn simulate_cmd(args: &SimArgs, cli: &Cli) -> Result<(), Error> {
    let raw = fs::read_to_string(&args.spec)?;
    let mut spec: ExperimentSpec = serde_json::from_str(&raw)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let result = run_experiment(&spec)?;
    let table = match cli.format.unwrap_or(Format::Csv) {
        Format::Csv => result_csv(&result),
        Format::Json => serde_json::to_string_pretty(&result)? + "\n",
    };
    let summary = SimSummary {
        scenario: spec.scenario.name(),
        n: spec.n,
        m: spec.m,
        replications: spec.replications,
        methods: spec.methods.iter().map(|m| m.name()).collect(),
        seed: spec.seed,
        n_failures: result.failures.len(),
        metrics: &result.rows,
    };
    // The metric table goes to --out; the summary always lands on stdout
    // so a missing --out still shows every metric.
    if let Some(path) = &cli.out {
        fs::write(path, &table)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
