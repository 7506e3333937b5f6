mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Intercity destination/mode choice: estimation, trip generation, accessibility and scenario forecasting.
#[derive(Parser, Debug)]
#[command(name = "intercity", version)]
struct Cli {
    /// Worker threads for likelihood evaluation (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Sum per-observation terms in a fixed order so outputs are byte-identical across runs and thread counts.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Joint RP/SP maximum-likelihood estimation of a choice model.
    Estimate(EstimateArgs),
    /// Base and alternative scenario demand, and the induced-travel report.
    Forecast(ForecastArgs),
    /// Gradient and probability self-checks at random parameter points.
    Validate(ValidateArgs),
    /// Fit a trip-generation regression.
    Tripgen(TripgenArgs),
    /// Per-person logsum accessibility under a scenario.
    Accessibility(AccessibilityArgs),
    /// Simulate a population, choice data and trip counts from known parameters.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Model specification (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Revealed-preference trips (CSV).
    #[arg(long)]
    rp: PathBuf,
    /// Stated-preference answers (CSV).
    #[arg(long)]
    sp: PathBuf,
    /// Person attributes (CSV).
    #[arg(long)]
    persons: PathBuf,
    /// Destination regions (CSV).
    #[arg(long)]
    regions: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Results document to write (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Starting values: a results document (.json) or a TOML table of name = value.
    #[arg(long)]
    start: Option<PathBuf>,
    /// Gradient max-norm tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    /// Estimated choice model (results document); one per trip purpose.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Trip-generation models document.
    #[arg(long)]
    tripgen: PathBuf,
    /// Alternative scenario (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Base scenario (TOML).
    #[arg(long)]
    base_scenario: PathBuf,
    /// Population to forecast for (persons CSV).
    #[arg(long)]
    population: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Destination-level scale of the accessibility logsum.
    #[arg(long, default_value_t = 1.0)]
    mu3: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    LambdaSign,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Random parameter points to check.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    points: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replay the points in a failure file written by --replay-out instead of drawing random ones.
    #[arg(long)]
    at: Option<PathBuf>,
    /// Where to write failing points (JSON) when a check fails.
    #[arg(long)]
    replay_out: Option<PathBuf>,
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    NegativeBinomial,
    Poisson,
    Linear,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InterceptArg {
    Free,
    FixedZero,
}

#[derive(Args, Debug)]
struct TripgenArgs {
    /// Trip counts with accessibility (CSV).
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    persons: PathBuf,
    /// Trip purpose the records and fit belong to.
    #[arg(long)]
    purpose: String,
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Comma-separated covariate names.
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
    /// Intercept handling for linear fits.
    #[arg(long, value_enum, default_value = "free")]
    intercept: InterceptArg,
    /// Hold the negative-binomial dispersion at this value.
    #[arg(long)]
    fixed_theta: Option<f64>,
    /// Trip-generation models document to write.
    #[arg(long)]
    out: PathBuf,
    /// Add to (or replace the purpose in) an existing document at --out.
    #[arg(long)]
    merge: bool,
}

#[derive(Args, Debug)]
struct AccessibilityArgs {
    /// Estimated choice model (results document); one per trip purpose.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    population: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    mu3: f64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Persons to draw.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Model specification; repeat for several purposes.
    #[arg(long = "spec", required = true)]
    specs: Vec<PathBuf>,
    /// True parameter values (TOML name = value), one per --spec, in the same order.
    #[arg(long = "truth", required = true)]
    truths: Vec<PathBuf>,
    /// RP trips per person.
    #[arg(long, default_value_t = 1)]
    rp_trips: usize,
    /// Only the first M persons report RP trips; one value for all specs or one per --spec.
    #[arg(long = "rp-persons")]
    rp_persons: Vec<usize>,
    /// Total RP trips, spread as evenly as possible over the reporting persons; one value or one per --spec.
    #[arg(long = "rp-total")]
    rp_total: Vec<usize>,
    /// SP answers per person; one value for all specs or one per --spec.
    #[arg(long = "sp-trips", default_values_t = [2])]
    sp_trips: Vec<usize>,
    /// Scenario to simulate in (default: the built-in seven-region corridor with HSR).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Trip-generation truth (TOML, one table per purpose); adds tripgen.csv.
    #[arg(long)]
    tripgen_truth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Exit status of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    NotConverged,
    ValidationFailed,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(match s {
            Status::Success => 0,
            Status::NotConverged => 2,
            Status::ValidationFailed => 3,
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.into()).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    let det = cli.deterministic;
    let result = match cli.command {
        Command::Estimate(a) => commands::estimate(a, det),
        Command::Forecast(a) => commands::forecast(a),
        Command::Validate(a) => commands::validate(a),
        Command::Tripgen(a) => commands::tripgen(a),
        Command::Accessibility(a) => commands::accessibility(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(status) => status.into(),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
