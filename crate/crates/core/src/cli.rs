//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for usage errors
//! (bad flags, missing or malformed input files, invalid configuration).

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::estimators::StatsError;
use crate::evalharness::{
    aa_simulation, evaluate, write_experiment_csv, AaConfig, EvalConfig, ExperimentLayout,
    GeneratorSpec, DEFAULT_LOG_LOCATION,
};
use crate::ingest::{
    parse_day, parse_exposures, parse_metrics, summary_table, write_report, write_report_file,
    IngestError, ReportRow, RunConfig,
};
use crate::pipeline::{run_pipeline, DayRange, PipelineError};
use crate::types::Method;

/// Environment variable overriding the number of worker threads.
pub const WORKERS_ENV: &str = "QUANTSTAT_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            // Output failures are not the caller's fault.
            IngestError::Io { .. } if !e.is_not_found() => CliError::Compute(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) | PipelineError::EmptyDayRange { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Compute(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::InvalidArgument(_) | StatsError::InvalidQuantile(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Compute(e.to_string()),
        }
    }
}

fn io_error(e: io::Error) -> CliError {
    CliError::Compute(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "quantstat",
    version,
    about = "Quantile metrics and their variance for member-randomized A/B tests"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute quantiles and standard deviations for every experiment cell.
    Compute(ComputeArgs),
    /// Bootstrap standard deviations for selected cells.
    Bootstrap(BootstrapArgs),
    /// Write a synthetic clustered experiment as metric and exposure CSV files.
    Generate(GenerateArgs),
    /// Compare the estimators against the bootstrap on synthetic datasets.
    Evaluate(EvaluateArgs),
    /// Measure the false-positive rate of a method on A/A splits.
    AaSim(AaSimArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Metrics CSV: member_id,geo,platform,page_key,load_time_ms,timestamp
    #[arg(long)]
    pub metrics: PathBuf,
    /// Exposures CSV: member_id,experiment_id,segment_id,variant,timestamp
    #[arg(long)]
    pub exposures: PathBuf,
    /// Quantiles to report, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
    pub quantiles: Vec<f64>,
    /// Half-width in ms of the fixed density interval.
    #[arg(long, default_value_t = crate::DEFAULT_HALFWIDTH_MS)]
    pub halfwidth: f64,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = crate::DEFAULT_BOOTSTRAP_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Number of member partitions [default: worker count]
    #[arg(long)]
    pub partitions: Option<usize>,
    /// First analyzed day (YYYY-MM-DD) [default: earliest input day]
    #[arg(long)]
    pub start_day: Option<String>,
    /// Last analyzed day (YYYY-MM-DD) [default: latest input day]
    #[arg(long)]
    pub end_day: Option<String>,
    /// Variant every other variant is compared against.
    #[arg(long)]
    pub control: Option<String>,
    /// Report file (JSON lines). Without it rows go to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ComputeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// proposed_dynamic, proposed_fixed, naive_iid or bootstrap.
    #[arg(long, default_value = "proposed_dynamic")]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub segment: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub geo: Option<String>,
    #[arg(long)]
    pub platform: Option<String>,
    #[arg(long)]
    pub page: Option<String>,
}

#[derive(Debug, Args)]
pub struct GeneratorArgs {
    #[arg(long, default_value_t = 3000)]
    pub members: usize,
    /// Mean page views per member.
    #[arg(long, default_value_t = 10.0)]
    pub mean_views: f64,
    /// Log-scale intraclass correlation.
    #[arg(long, default_value_t = 0.6)]
    pub icc: f64,
    /// Log-scale location of load times.
    #[arg(long, default_value_t = DEFAULT_LOG_LOCATION)]
    pub log_location: f64,
}

impl GeneratorArgs {
    fn spec(&self, seed: u64) -> Result<GeneratorSpec, CliError> {
        if self.members == 0 {
            return Err(CliError::Usage("--members must be at least 1".into()));
        }
        if !(self.mean_views >= 1.0 && self.mean_views.is_finite()) {
            return Err(CliError::Usage("--mean-views must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.icc) {
            return Err(CliError::Usage("--icc must be in [0, 1]".into()));
        }
        Ok(GeneratorSpec {
            log_location: self.log_location,
            ..GeneratorSpec::with_icc(self.members, self.mean_views, self.icc, seed)
        })
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Log-scale shift of the treatment variant.
    #[arg(long, default_value_t = 0.0)]
    pub treatment_shift: f64,
    /// Days of traffic starting 2023-04-01.
    #[arg(long, default_value_t = 7)]
    pub days: u32,
    #[arg(long)]
    pub metrics_out: PathBuf,
    #[arg(long)]
    pub exposures_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value_t = 50)]
    pub datasets: usize,
    #[arg(long, default_value_t = 30_000)]
    pub members: usize,
    #[arg(long, default_value_t = DEFAULT_LOG_LOCATION)]
    pub log_location: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
    pub quantiles: Vec<f64>,
    #[arg(long, default_value_t = crate::DEFAULT_BOOTSTRAP_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = crate::DEFAULT_HALFWIDTH_MS)]
    pub halfwidth: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write every comparison row as JSON lines.
    #[arg(long)]
    pub rows_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AaSimArgs {
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long, default_value_t = 500)]
    pub replications: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value = "proposed_dynamic")]
    pub method: Method,
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
    #[arg(long, default_value_t = crate::DEFAULT_HALFWIDTH_MS)]
    pub halfwidth: f64,
    #[arg(long, default_value_t = crate::DEFAULT_BOOTSTRAP_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
}

fn day_range(
    start: Option<&str>,
    end: Option<&str>,
    metrics: &[crate::types::MetricRecord],
) -> Result<Option<DayRange>, CliError> {
    let parse = |s: &str| parse_day(s).map_err(CliError::Usage);
    let start = start.map(parse).transpose()?;
    let end = end.map(parse).transpose()?;
    if start.is_none() && end.is_none() {
        return Ok(None);
    }
    let days = metrics.iter().map(|m| m.day);
    let start = start.or_else(|| days.clone().min()).unwrap_or(0);
    let end = end.or_else(|| days.max()).unwrap_or(start);
    Ok(Some(DayRange::new(start, end)?))
}

fn run_config(input: &InputArgs, method: Method) -> RunConfig {
    RunConfig {
        metrics_path: input.metrics.clone(),
        exposures_path: input.exposures.clone(),
        quantiles: input.quantiles.clone(),
        method,
        fixed_halfwidth_ms: input.halfwidth,
        bootstrap_replicates: input.replicates,
        seed: input.seed,
        partitions: input.partitions.unwrap_or_else(rayon::current_num_threads),
        day_range: None,
        control_variant: input.control.clone(),
        output_path: input.out.clone(),
    }
}

/// Parses both inputs and runs the pipeline.
fn compute_rows(input: &InputArgs, method: Method) -> Result<Vec<ReportRow>, CliError> {
    let mut config = run_config(input, method);
    config.pipeline_config().validate()?;
    let metrics = parse_metrics(&config.metrics_path)?;
    let exposures = parse_exposures(&config.exposures_path)?;
    config.day_range = day_range(
        input.start_day.as_deref(),
        input.end_day.as_deref(),
        &metrics,
    )?;
    Ok(run_pipeline(
        &metrics,
        &exposures,
        &config.pipeline_config(),
    )?)
}

fn emit(rows: &[ReportRow], out: Option<&Path>) -> Result<(), CliError> {
    let stdout = io::stdout();
    match out {
        Some(path) => {
            write_report_file(rows, path)?;
            let mut lock = stdout.lock();
            write!(lock, "{}", summary_table(rows)).map_err(io_error)?;
            writeln!(lock, "{} row(s) written to {}", rows.len(), path.display()).map_err(io_error)
        }
        None => write_report(rows, stdout.lock()).map_err(io_error),
    }
}

fn compute(args: &ComputeArgs) -> Result<(), CliError> {
    let rows = compute_rows(&args.input, args.method)?;
    emit(&rows, args.input.out.as_deref())
}

fn bootstrap(args: &BootstrapArgs) -> Result<(), CliError> {
    let rows = compute_rows(&args.input, Method::Bootstrap)?;
    let keep = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w == have);
    let rows: Vec<ReportRow> = rows
        .into_iter()
        .filter(|r| {
            keep(&args.experiment, &r.experiment_id)
                && keep(&args.segment, &r.segment_id)
                && keep(&args.variant, &r.variant)
                && keep(&args.geo, &r.geo)
                && keep(&args.platform, &r.platform)
                && keep(&args.page, &r.page_key)
        })
        .collect();
    if rows.is_empty() {
        return Err(CliError::Usage("no cell matches the selection".into()));
    }
    emit(&rows, args.input.out.as_deref())
}

fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    if args.days == 0 {
        return Err(CliError::Usage("--days must be at least 1".into()));
    }
    let spec = args.generator.spec(args.seed)?;
    let layout = ExperimentLayout {
        treatment_shift: args.treatment_shift,
        days: args.days,
        ..ExperimentLayout::default()
    };
    let written = write_experiment_csv(&spec, &layout, &args.metrics_out, &args.exposures_out)
        .map_err(io_error)?;
    println!(
        "wrote {} metric rows to {} and {} exposure rows to {}",
        written.metrics,
        args.metrics_out.display(),
        written.exposures,
        args.exposures_out.display()
    );
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), CliError> {
    let config = EvalConfig {
        n_datasets: args.datasets,
        n_members: args.members,
        log_location: args.log_location,
        quantiles: args.quantiles.clone(),
        replicates: args.replicates,
        fixed_halfwidth: args.halfwidth,
        seed: args.seed,
        ..EvalConfig::default()
    };
    let report = evaluate(&config)?;
    print!("{}", report.table());
    if let Some(path) = &args.rows_out {
        let mut out = io::BufWriter::new(std::fs::File::create(path).map_err(io_error)?);
        for row in &report.rows {
            serde_json::to_writer(&mut out, row).map_err(|e| CliError::Compute(e.to_string()))?;
            out.write_all(b"\n").map_err(io_error)?;
        }
        out.flush().map_err(io_error)?;
    }
    Ok(())
}

fn aa_sim(args: &AaSimArgs) -> Result<(), CliError> {
    let config = AaConfig {
        spec: args.generator.spec(0)?,
        replications: args.replications,
        alpha: args.alpha,
        method: args.method,
        q: args.q,
        fixed_halfwidth: args.halfwidth,
        replicates: args.replicates,
        seed: args.seed,
    };
    let result = aa_simulation(&config)?;
    println!(
        "{}: {} of {} A/A splits rejected at alpha {} (rate {:.4}, {} failed)",
        result.method,
        result.rejections,
        result.replications,
        args.alpha,
        result.rejection_rate,
        result.failures
    );
    Ok(())
}

/// Applies the worker-count override, if any. Only the first call has effect.
fn configure_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let workers: usize = raw.trim().parse().ok().filter(|n| *n >= 1).ok_or_else(|| {
        CliError::Usage(format!(
            "{WORKERS_ENV} must be a positive integer, got '{raw}'"
        ))
    })?;
    // Fails only if a global pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    configure_workers()?;
    match &cli.command {
        Command::Compute(a) => compute(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::AaSim(a) => aa_sim(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn compute_without_flags_is_usage_error() {
        assert_eq!(run(["quantstat", "compute"]), 2);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["quantstat", "evaluate", "--bogus"]), 2);
    }

    #[test]
    fn help_succeeds() {
        assert_eq!(run(["quantstat", "--help"]), 0);
    }

    #[test]
    fn missing_file_is_usage_error() {
        let code = run([
            "quantstat",
            "compute",
            "--metrics",
            "/nonexistent/m.csv",
            "--exposures",
            "/nonexistent/e.csv",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn bad_quantile_is_usage_error() {
        let cli = Cli::try_parse_from([
            "quantstat",
            "compute",
            "--metrics",
            "m.csv",
            "--exposures",
            "e.csv",
            "--quantiles",
            "1.5",
        ])
        .unwrap();
        assert!(matches!(execute(&cli), Err(CliError::Usage(_))));
    }

    #[test]
    fn method_flag_parses() {
        let cli = Cli::try_parse_from([
            "quantstat",
            "compute",
            "--metrics",
            "m",
            "--exposures",
            "e",
            "--method",
            "naive_iid",
        ])
        .unwrap();
        match cli.command {
            Command::Compute(a) => assert_eq!(a.method, Method::NaiveIid),
            _ => unreachable!(),
        }
    }
}
