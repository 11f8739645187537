//! Command-line front end: run one experiment, sweep a grid of them,
//! generate a synthetic stream, or verify the covariance-gap analysis
//! numerically.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use drift_forge::adapter::AdaptConfig;
use drift_forge::forecaster::ModelKind;
use drift_forge::harness::{
    emit_suite_rows, emit_suite_summary, protocol_label, run_experiment, run_suite, DataSource,
    ExperimentConfig, Method, ReportRecord, SuiteConfig, SuiteOutcome,
};
use drift_forge::stream::{generate_synthetic, save_csv, ProtocolKind, SyntheticSpec};
use drift_forge::theory::{run_verification, TheoryReport, VerificationOptions};
use drift_forge::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "drift-forge",
    version,
    about = "Online time-series forecasting with drift detection and replay-augmented adaptation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one online forecasting experiment and print its summary.
    Run(Box<RunArgs>),
    /// Run a method x horizon x protocol x seed grid from a TOML file.
    Suite(SuiteArgs),
    /// Generate a synthetic piecewise-autoregressive stream as CSV.
    Synth(SynthArgs),
    /// Randomized numerical checks of the covariance-gap theory.
    VerifyTheory(VerifyArgs),
}

/// Exactly one stream source must be given.
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// CSV stream, one column per channel, header row expected.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// TOML description of a synthetic piecewise-AR stream.
    #[arg(long, value_name = "PATH")]
    synthetic_spec: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    /// Per-round gradient updates only.
    Naive,
    /// Drift detection plus full-parameter adaptation.
    D3a,
    /// Drift detection plus regressor-only adaptation.
    D3aStar,
}

impl From<MethodArg> for Method {
    fn from(value: MethodArg) -> Self {
        match value {
            MethodArg::Naive => Method::Naive,
            MethodArg::D3a => Method::D3a,
            MethodArg::D3aStar => Method::D3aStar,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProtocolArg {
    /// Ground truth arrives at the end of the round it was issued in.
    Standard,
    /// Ground truth for round r arrives once per horizon, in batches.
    Delayed,
}

impl From<ProtocolArg> for ProtocolKind {
    fn from(value: ProtocolArg) -> Self {
        match value {
            ProtocolArg::Standard => ProtocolKind::Standard,
            ProtocolArg::Delayed => ProtocolKind::DelayedFeedback,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ForecasterArg {
    /// Affine map from the flattened look-back window.
    Linear,
    /// One hidden layer with a ReLU, then the affine regressor.
    Mlp,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Treat the first CSV row as data rather than a header.
    #[arg(long, requires = "data")]
    no_header: bool,
    /// Look-back window length fed to the forecaster.
    #[arg(long, default_value_t = 60, value_name = "STEPS")]
    lookback: usize,
    /// Forecast horizon per round.
    #[arg(long, default_value_t = 24, value_name = "STEPS")]
    horizon: usize,
    /// Online learning method.
    #[arg(long, value_enum, default_value_t = MethodArg::D3a)]
    method: MethodArg,
    /// Ground-truth revelation protocol.
    #[arg(long, value_enum, default_value_t = ProtocolArg::Standard)]
    protocol: ProtocolArg,
    /// Detector window length; also the recent-memory capacity.
    #[arg(long, default_value_t = 16, value_name = "STEPS")]
    lw: usize,
    /// Steps between scheduled refreshes [default: 64 * lw].
    #[arg(long, value_name = "STEPS")]
    mt: Option<usize>,
    /// Two-sided significance level of the drift test.
    #[arg(long, default_value_t = 0.01, value_name = "PROB")]
    alpha_t: f64,
    /// Replay weight during adaptation [default: chosen by channel count].
    #[arg(long, value_name = "WEIGHT")]
    lambda: Option<f64>,
    /// Learning rate of the per-round online updates.
    #[arg(long, default_value_t = 1e-3, value_name = "RATE")]
    lr: f64,
    /// Experiment seed; model init, augmentation, and adaptation use
    /// independent substreams of it. A synthetic stream keeps the seed
    /// written in its spec file.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write report.json, trace.csv, verdicts.jsonl, and model.txt here.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Forecaster architecture.
    #[arg(long, value_enum, default_value_t = ForecasterArg::Linear)]
    forecaster: ForecasterArg,
    /// Hidden width of the mlp forecaster; ignored by linear.
    #[arg(long, default_value_t = 64, value_name = "UNITS")]
    hidden_width: usize,
    /// Leading fraction of the stream reserved for normalization and
    /// pre-training.
    #[arg(long, default_value_t = 0.25, value_name = "FRAC")]
    warm_fraction: f64,
    /// Skip the single pre-training pass over the warm split.
    #[arg(long)]
    no_pretrain: bool,
    /// Capacity of the older replay bank fed by memory evictions.
    #[arg(long, default_value_t = 512, value_name = "PAIRS")]
    lv: usize,
    /// Learning rate of triggered adaptation.
    #[arg(long, default_value_t = 1e-3, value_name = "RATE")]
    adapt_lr: f64,
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let data = match (self.source.data, self.source.synthetic_spec) {
            (Some(path), None) => DataSource::Csv { path, has_header: !self.no_header },
            (None, Some(spec_path)) => {
                DataSource::Synthetic(SyntheticSpec::from_toml_file(&spec_path)?)
            }
            // clap's group(required, !multiple) rules the other arms out.
            _ => unreachable!("clap enforces exactly one data source"),
        };
        let model = match self.forecaster {
            ForecasterArg::Linear => ModelKind::Linear,
            ForecasterArg::Mlp => ModelKind::Mlp { hidden_width: self.hidden_width },
        };
        let adapt = AdaptConfig {
            lr: self.adapt_lr,
            lambda: self.lambda,
            ..AdaptConfig::default()
        };
        Ok(ExperimentConfig {
            data,
            lookback: self.lookback,
            horizon: self.horizon,
            warm_fraction: self.warm_fraction,
            protocol: self.protocol.into(),
            method: self.method.into(),
            model,
            online_lr: self.lr,
            pretrain: !self.no_pretrain,
            window_len: self.lw,
            significance: self.alpha_t,
            refresh_interval: self.mt,
            prev_capacity: self.lv,
            adapt,
            seed: self.seed,
            out_dir: self.out_dir,
        })
    }
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// TOML grid file: a base experiment plus methods/horizons/seeds lists.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML description of the stream to generate.
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
    /// Destination CSV.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Override the seed written in the spec file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Largest matrix dimension drawn in any sweep (at least 2).
    #[arg(long, default_value_t = 20, value_name = "D")]
    dim: usize,
    /// Instances per sweep; theorem-2 uses it as the per-band gate target.
    #[arg(long, default_value_t = 1000, value_name = "N")]
    trials: usize,
    /// Seed of every sweep's instance generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here; a short summary goes to stdout. Without
    /// this flag the full JSON is printed instead.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = args.into_config()?;
    let (report, trace) = run_experiment(&config)?;
    print_run_summary(&report, trace.rows.len());
    Ok(())
}

fn print_run_summary(report: &ReportRecord, trace_rows: usize) {
    println!("method            {}", report.method.label());
    println!("protocol          {}", protocol_label(report.config.protocol));
    println!("seed              {}", report.seed);
    println!("rounds scored     {} ({} issued, {} unrevealed)",
        report.n_rounds, report.n_rounds_issued, report.n_unrevealed);
    println!("accumulated mse   {:.6e}", report.accumulated_mse);
    println!("accumulated mae   {:.6e}", report.accumulated_mae);
    println!("updates           {} ({} skipped)", report.n_training_updates, report.skipped_updates);
    println!("alarms            {}", report.alarms.len());
    println!("refreshes         {}", report.scheduled_refreshes.len());
    println!("adaptations       {}", report.adaptation_events.len());
    println!("wall time         {:.3}s", report.wall_time_secs);
    if let Some(dir) = &report.config.out_dir {
        println!("artifacts         {} ({} trace rows)", dir.display(), trace_rows);
    }
}

fn cmd_suite(args: SuiteArgs) -> Result<()> {
    let suite = SuiteConfig::from_toml_file(&args.config)?;
    let configs = suite.expand();
    let parallelism = suite.parallelism.unwrap_or_else(|| configs.len().max(1));
    let outcome = run_suite(&configs, parallelism)?;
    print_suite_tables(&outcome);
    if let Some(dir) = &suite.out_dir {
        std::fs::create_dir_all(dir)?;
        emit_suite_rows(&outcome.rows, &dir.join("suite_rows.csv"))?;
        emit_suite_summary(&outcome.summary, &dir.join("suite_summary.csv"))?;
        println!("tables written to {}", dir.display());
    }
    if !outcome.failures.is_empty() {
        return Err(Error::Config(format!(
            "{} of {} runs failed",
            outcome.failures.len(),
            outcome.rows.len() + outcome.failures.len()
        )));
    }
    Ok(())
}

fn print_suite_tables(outcome: &SuiteOutcome) {
    println!("method,horizon,protocol,seed,mse,mae,n_rounds");
    for row in &outcome.rows {
        println!(
            "{},{},{},{},{:.6e},{:.6e},{}",
            row.method.label(),
            row.horizon,
            protocol_label(row.protocol),
            row.seed,
            row.mse,
            row.mae,
            row.n_rounds
        );
    }
    println!();
    println!("method,horizon,protocol,n_seeds,mean_mse,mean_mae");
    for cell in &outcome.summary {
        println!(
            "{},{},{},{},{:.6e},{:.6e}",
            cell.method.label(),
            cell.horizon,
            protocol_label(cell.protocol),
            cell.n_seeds,
            cell.mean_mse,
            cell.mean_mae
        );
    }
    for failure in &outcome.failures {
        eprintln!(
            "failed: {} h{} {} seed {}: {}",
            failure.method.label(),
            failure.horizon,
            protocol_label(failure.protocol),
            failure.seed,
            failure.error
        );
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::from_toml_file(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let series = generate_synthetic(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_csv(&series, &args.out)?;
    println!(
        "wrote {} steps x {} channels to {}",
        series.n_steps(),
        series.n_channels(),
        args.out.display()
    );
    Ok(())
}

fn cmd_verify_theory(args: VerifyArgs) -> Result<()> {
    if args.dim < 2 {
        return Err(Error::Config(format!("--dim must be at least 2, got {}", args.dim)));
    }
    if args.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let opts = VerificationOptions {
        seed: args.seed,
        prop1_instances: args.trials,
        prop1_max_d: args.dim,
        theorem1_instances: args.trials,
        theorem1_max_d: args.dim,
        theorem2_statement_target: args.trials,
        theorem2_max_d: args.dim,
        ..VerificationOptions::default()
    };
    let report = run_verification(&opts)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, json + "\n")?;
            print_theory_summary(&report);
            println!("report written to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn print_theory_summary(report: &TheoryReport) {
    println!(
        "proposition-1  {}/{} within tolerance, max abs error {:.3e}",
        report.prop1.satisfied, report.prop1.instances, report.prop1.max_abs_error
    );
    println!(
        "theorem-1      {}/{} bounded, min slack {:.3e}",
        report.theorem1.satisfied, report.theorem1.instances, report.theorem1.min_slack
    );
    for combo in &report.theorem2 {
        println!(
            "theorem-2      c={} band={}: {}/{} ({:.1}%)",
            combo.c_variant,
            combo.band,
            combo.satisfied,
            combo.gated,
            100.0 * combo.fraction
        );
    }
    println!(
        "noisy-ols      max coordinate error {:.3e} (tolerance {:.0e}) -> {}",
        report.noisy_ols.max_coord_error,
        report.noisy_ols.tolerance,
        if report.noisy_ols.satisfied { "ok" } else { "FAILED" }
    );
    if report.theorem2_fully_satisfied.is_empty() {
        println!("fully satisfied theorem-2 combinations: none");
    } else {
        println!(
            "fully satisfied theorem-2 combinations: {}",
            report.theorem2_fully_satisfied.join(", ")
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::Suite(args) => cmd_suite(args),
        Command::Synth(args) => cmd_synth(args),
        Command::VerifyTheory(args) => cmd_verify_theory(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
