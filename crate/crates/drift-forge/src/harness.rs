//! Experiment orchestration: wires the stream, forecaster, detector, and
//! adapter into the online forecasting loop under either evaluation
//! protocol, computes accumulated metrics, and serializes reports and plot
//! traces.
//!
//! One experiment is one sequential execution. [`run_suite`] runs many
//! experiments in parallel with fully disjoint state; the `DRIFT_FORGE_THREADS`
//! environment variable caps its parallelism.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    adapt_full, adapt_regressor_only, feature_variance, synthesize_augmented, AdaptConfig,
    AdaptMode, AdaptationTrace, MemoryBank, TriggerKind,
};
use crate::detector::{DetectorConfig, DetectorState, VerdictKind, VerdictRecord};
use crate::forecaster::{
    grad_step, init_model, mae_metric, mse_loss, predict, save_model, ForecasterSpec, ModelKind,
    Prediction,
};
use crate::stream::{
    fit_normalizer, generate_synthetic, load_csv, split_warmup, window_at, MultivariateSeries,
    ProtocolKind, ProtocolState, SyntheticSpec,
};
use crate::{Error, Result};

/// Version tag embedded in every serialized report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

const TAG_INIT: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_ADAPT: u64 = 3;

/// Deterministic substream seed: one splitmix64 scramble of the master seed
/// and a stream tag. Nested calls carve independent, reproducible streams
/// out of a single experiment seed.
pub fn subseed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(tag.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Update strategy run by the online loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Per-round gradient updates only; detection and adaptation disabled.
    Naive,
    /// Detection plus full-parameter adaptation on every trigger.
    D3a,
    /// Detection plus regressor-only adaptation with plateau-annealed
    /// learning rate; always implies [`AdaptMode::RegressorOnly`].
    D3aStar,
}

impl Method {
    /// The adaptation mode this method triggers, if any. `D3aStar` maps to
    /// `RegressorOnly` by construction, so the pairing cannot be mis-stated
    /// in a config file.
    pub fn adapt_mode(&self) -> Option<AdaptMode> {
        match self {
            Method::Naive => None,
            Method::D3a => Some(AdaptMode::Full),
            Method::D3aStar => Some(AdaptMode::RegressorOnly),
        }
    }

    /// Kebab-case name used in file names, tables, and CLI output.
    pub fn label(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::D3a => "d3a",
            Method::D3aStar => "d3a-star",
        }
    }
}

/// Where the stream comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default = "default_true")]
        has_header: bool,
    },
    Synthetic(SyntheticSpec),
}

fn default_true() -> bool {
    true
}

fn default_lookback() -> usize {
    60
}

fn default_horizon() -> usize {
    24
}

fn default_warm_fraction() -> f64 {
    0.25
}

fn default_protocol() -> ProtocolKind {
    ProtocolKind::Standard
}

fn default_method() -> Method {
    Method::D3a
}

fn default_model() -> ModelKind {
    ModelKind::Linear
}

fn default_online_lr() -> f64 {
    1e-3
}

fn default_window_len() -> usize {
    16
}

fn default_significance() -> f64 {
    0.01
}

fn default_prev_capacity() -> usize {
    512
}

/// Complete description of one experiment. Every field other than `data`
/// has a default, so a minimal TOML config is just a data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Look-back window length fed to the forecaster.
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    /// Forecast horizon per round.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Leading fraction of the stream reserved for normalization and
    /// pre-training.
    #[serde(default = "default_warm_fraction")]
    pub warm_fraction: f64,
    #[serde(default = "default_protocol")]
    pub protocol: ProtocolKind,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Learning rate of the per-round online updates (and of the warm-up
    /// pass).
    #[serde(default = "default_online_lr")]
    pub online_lr: f64,
    /// One full pass over the warm split before streaming begins.
    #[serde(default = "default_true")]
    pub pretrain: bool,
    /// Trailing-window length of the detector; also the capacity of the
    /// recent memory bank.
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    /// Two-sided significance of the drift test.
    #[serde(default = "default_significance")]
    pub significance: f64,
    /// Steps between scheduled refreshes; defaults to `64 * window_len`.
    #[serde(default)]
    pub refresh_interval: Option<usize>,
    /// Capacity of the older replay bank fed by evictions.
    #[serde(default = "default_prev_capacity")]
    pub prev_capacity: usize,
    /// Retraining hyperparameters; the `seed` field inside is overridden
    /// per event with a substream of the experiment seed.
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub seed: u64,
    /// When set, the report, trace, verdict log, and final model are
    /// written here.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Cheap validation of everything checkable before touching data, so
    /// config mistakes surface before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::Config("lookback must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.warm_fraction > 0.0 && self.warm_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warm_fraction must be in (0, 1), got {}",
                self.warm_fraction
            )));
        }
        if !self.online_lr.is_finite() || self.online_lr < 0.0 {
            return Err(Error::Config("online_lr must be finite and non-negative".into()));
        }
        if let ModelKind::Mlp { hidden_width } = self.model {
            if hidden_width == 0 {
                return Err(Error::Config("hidden_width must be >= 1".into()));
            }
        }
        if self.prev_capacity == 0 {
            return Err(Error::Config("prev_capacity must be >= 1".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.detector_config()?;
        self.adapt.validate()?;
        Ok(())
    }

    /// Detector settings with the refresh-interval default applied.
    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let refresh = self.refresh_interval.unwrap_or(64 * self.window_len);
        DetectorConfig::new(self.window_len, self.significance, refresh)
    }

    /// Loads and validates a TOML config file.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

/// One scored round of the trace CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub mse: f64,
    pub mae: f64,
    pub cumulative_mean_mse: f64,
    pub cumulative_mean_mae: f64,
    pub verdict: VerdictKind,
}

/// Per-round losses with running means; the plot-data source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

/// Arithmetic means of the per-round MSE and MAE columns.
pub fn accumulate(trace: &LossTrace) -> Result<(f64, f64)> {
    if trace.rows.is_empty() {
        return Err(Error::Bounds("cannot accumulate an empty trace".into()));
    }
    let n = trace.rows.len() as f64;
    let mse = trace.rows.iter().map(|r| r.mse).sum::<f64>() / n;
    let mae = trace.rows.iter().map(|r| r.mae).sum::<f64>() / n;
    Ok((mse, mae))
}

/// One drift alarm: the round the check ran in and its z statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub round: usize,
    pub z: f64,
}

/// Everything one experiment produced, minus the per-round trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub schema_version: u32,
    pub seed: u64,
    pub method: Method,
    /// Mean per-round MSE over all evaluated rounds.
    pub accumulated_mse: f64,
    /// Mean per-round MAE over all evaluated rounds.
    pub accumulated_mae: f64,
    /// Rounds that were scored (revealed before the stream ended).
    pub n_rounds: usize,
    /// Rounds that issued a prediction.
    pub n_rounds_issued: usize,
    /// Issued rounds whose ground truth never arrived; dropped from the
    /// metrics.
    pub n_unrevealed: usize,
    /// Online gradient updates attempted (one per revelation event).
    pub n_training_updates: u64,
    /// Updates skipped because the loss or gradient was non-finite.
    pub skipped_updates: u64,
    pub alarms: Vec<AlarmRecord>,
    pub scheduled_refreshes: Vec<usize>,
    pub adaptation_events: Vec<AdaptationTrace>,
    pub wall_time_secs: f64,
    pub config: ExperimentConfig,
}

struct EventLog {
    alarms: Vec<AlarmRecord>,
    refreshes: Vec<usize>,
    adaptations: Vec<AdaptationTrace>,
    verdicts: Vec<VerdictRecord>,
    training_updates: u64,
    skipped_updates: u64,
}

/// Runs one experiment to completion and returns the report plus the full
/// per-round trace. Deterministic: identical `(config, seed)` inputs yield
/// bit-identical traces. If an output directory is configured and the loop
/// aborts, the partial trace is flushed to disk before the error returns.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(ReportRecord, LossTrace)> {
    config.validate()?;
    let start = Instant::now();

    let raw = match &config.data {
        DataSource::Csv { path, has_header } => load_csv(path, *has_header)?,
        DataSource::Synthetic(spec) => generate_synthetic(spec)?,
    };
    let (warm_raw, online_raw) =
        split_warmup(&raw, config.warm_fraction, config.lookback, config.horizon)?;
    let normalizer = fit_normalizer(&warm_raw)?;
    let warm = normalizer.apply(&warm_raw)?;
    let online = normalizer.apply(&online_raw)?;

    let fspec = ForecasterSpec {
        kind: config.model,
        channels: raw.n_channels(),
        lookback: config.lookback,
        horizon: config.horizon,
        init_seed: subseed(config.seed, TAG_INIT),
    };
    fspec.validate()?;
    let (mut params, mut adam) = init_model(&fspec, config.online_lr)?;

    if config.pretrain {
        let last = warm.n_steps() - config.lookback - config.horizon;
        for t in 0..=last {
            let pair = window_at(&warm, t, config.lookback, config.horizon)?;
            grad_step(&mut params, &mut adam, &fspec, &pair.lookback, &pair.target, false)?;
        }
    }

    let mut detector = DetectorState::new(config.detector_config()?)?;
    let mut memory = MemoryBank::new(config.window_len)?;
    let mut prev = MemoryBank::new(config.prev_capacity)?;
    let mut protocol = ProtocolState::new(config.protocol, config.horizon)?;
    let n_rounds_issued = online.n_steps() - config.lookback - config.horizon + 1;

    let mut rows: Vec<TraceRow> = Vec::with_capacity(n_rounds_issued);
    let mut log = EventLog {
        alarms: Vec::new(),
        refreshes: Vec::new(),
        adaptations: Vec::new(),
        verdicts: Vec::new(),
        training_updates: 0,
        skipped_updates: 0,
    };

    let loop_result = online_loop(
        config, &online, &fspec, &mut params, &mut adam, &mut detector, &mut memory, &mut prev,
        &mut protocol, n_rounds_issued, &mut rows, &mut log,
    );
    if let Err(err) = loop_result {
        if let Some(dir) = &config.out_dir {
            let _ = std::fs::create_dir_all(dir);
            let _ = emit_trace(&LossTrace { rows }, &dir.join("trace.csv"));
        }
        return Err(err);
    }

    let trace = LossTrace { rows };
    let (accumulated_mse, accumulated_mae) = accumulate(&trace).map_err(|_| {
        Error::Config(format!(
            "no round was revealed before the stream ended \
             ({n_rounds_issued} issued, horizon {})",
            config.horizon
        ))
    })?;

    let report = ReportRecord {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: config.seed,
        method: config.method,
        accumulated_mse,
        accumulated_mae,
        n_rounds: trace.rows.len(),
        n_rounds_issued,
        n_unrevealed: n_rounds_issued - trace.rows.len(),
        n_training_updates: log.training_updates,
        skipped_updates: log.skipped_updates,
        alarms: log.alarms,
        scheduled_refreshes: log.refreshes,
        adaptation_events: log.adaptations,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };

    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        emit_report(&report, &dir.join("report.json"))?;
        emit_trace(&trace, &dir.join("trace.csv"))?;
        emit_verdicts(&log.verdicts, &dir.join("verdicts.jsonl"))?;
        save_model(&params, &fspec, &dir.join("model.txt"))?;
    }

    Ok((report, trace))
}

/// The per-round loop: predict, reveal per protocol, score and record every
/// revealed pair, one gradient update on the newest revealed pair, push all
/// revealed pairs to memory, then check the detector and adapt on a trigger.
#[allow(clippy::too_many_arguments)]
fn online_loop(
    config: &ExperimentConfig,
    online: &MultivariateSeries,
    fspec: &ForecasterSpec,
    params: &mut crate::forecaster::ParamVector,
    adam: &mut crate::forecaster::AdamState,
    detector: &mut DetectorState,
    memory: &mut MemoryBank,
    prev: &mut MemoryBank,
    protocol: &mut ProtocolState,
    n_rounds_issued: usize,
    rows: &mut Vec<TraceRow>,
    log: &mut EventLog,
) -> Result<()> {
    let detect = config.method != Method::Naive;
    let mut pending: VecDeque<(usize, Prediction)> = VecDeque::new();
    let mut sum_mse = 0.0;
    let mut sum_mae = 0.0;
    let mut event_ordinal = 0u64;

    for round in 0..n_rounds_issued {
        let pair = window_at(online, round, config.lookback, config.horizon)?;
        let pred = predict(params, fspec, &pair.lookback)?;
        pending.push_back((round, pred));

        let revealed = protocol.advance(round, pair)?;
        if revealed.is_empty() {
            continue;
        }

        for (issue_round, rpair) in &revealed {
            let (pred_round, pred) = pending
                .pop_front()
                .expect("every issued round has a stored prediction");
            debug_assert_eq!(pred_round, *issue_round);
            let mse = mse_loss(&pred, &rpair.target);
            let mae = mae_metric(&pred, &rpair.target);
            sum_mse += mse;
            sum_mae += mae;
            let n = (rows.len() + 1) as f64;
            rows.push(TraceRow {
                round: *issue_round,
                mse,
                mae,
                cumulative_mean_mse: sum_mse / n,
                cumulative_mean_mae: sum_mae / n,
                verdict: VerdictKind::NoDrift,
            });
            if detect {
                detector.record_loss(mse)?;
            }
        }

        let (_, newest) = revealed.last().expect("revealed batch is nonempty");
        let step = grad_step(params, adam, fspec, &newest.lookback, &newest.target, false)?;
        log.training_updates += 1;
        if !step.applied {
            log.skipped_updates += 1;
        }
        for (_, rpair) in revealed {
            if let Some(evicted) = memory.push(rpair) {
                prev.push(evicted);
            }
        }

        if !detect {
            continue;
        }
        let verdict = detector.check();
        log.verdicts.push(VerdictRecord::new(round, &verdict));
        let last_row = rows.last_mut().expect("at least one row was just scored");
        last_row.verdict = verdict.kind;
        let trigger = match verdict.kind {
            VerdictKind::NoDrift => continue,
            VerdictKind::DriftAlarm => {
                log.alarms.push(AlarmRecord {
                    round,
                    z: verdict.z_score.unwrap_or(f64::NAN),
                });
                TriggerKind::DriftAlarm
            }
            VerdictKind::ScheduledRefresh => {
                log.refreshes.push(round);
                TriggerKind::ScheduledRefresh
            }
        };

        let scales = feature_variance(&[&*prev, &*memory])?;
        let augmented = synthesize_augmented(
            prev,
            &scales,
            subseed(subseed(config.seed, TAG_AUGMENT), event_ordinal),
        )?;
        let mut adapt_cfg = config.adapt;
        adapt_cfg.seed = subseed(subseed(config.seed, TAG_ADAPT), event_ordinal);
        let trace = match config.method {
            Method::D3a => {
                adapt_full(params, fspec, memory, &augmented, &adapt_cfg, round, trigger)?
            }
            Method::D3aStar => {
                adapt_regressor_only(params, fspec, memory, &augmented, &adapt_cfg, round, trigger)?
            }
            Method::Naive => unreachable!("naive never reaches adaptation"),
        };
        log.adaptations.push(trace);
        detector.reset();
        event_ordinal += 1;
    }
    Ok(())
}

/// Writes the report as pretty-printed JSON.
pub fn emit_report(record: &ReportRecord, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, record)?;
    writeln!(file)?;
    Ok(())
}

/// Parses a report written by [`emit_report`]; the round trip is exact.
pub fn read_report(path: &Path) -> Result<ReportRecord> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the trace as CSV with the fixed column set
/// `round,mse,mae,cumulative_mean_mse,cumulative_mean_mae,verdict`.
pub fn emit_trace(trace: &LossTrace, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in &trace.rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Parses a trace written by [`emit_trace`]; the round trip is exact.
pub fn read_trace(path: &Path) -> Result<LossTrace> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(LossTrace { rows })
}

/// Writes one JSON object per detector check, in order.
pub fn emit_verdicts(records: &[VerdictRecord], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        let line = serde_json::to_string(record)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Grid description for [`run_suite`]: the cross product of methods,
/// horizons, optional protocols, and seeds applied to a base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub base: ExperimentConfig,
    pub methods: Vec<Method>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Defaults to the base config's protocol only.
    #[serde(default)]
    pub protocols: Option<Vec<ProtocolKind>>,
    /// Worker threads; defaults to one per configuration, capped by the
    /// `DRIFT_FORGE_THREADS` environment variable.
    #[serde(default)]
    pub parallelism: Option<usize>,
    /// Per-run artifacts land in subdirectories of this directory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.horizons.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "suite needs at least one method, horizon, and seed".into(),
            ));
        }
        if matches!(&self.protocols, Some(p) if p.is_empty()) {
            return Err(Error::Config("protocols, when given, must be nonempty".into()));
        }
        if self.parallelism == Some(0) {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: SuiteConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Expands the grid into concrete experiment configs. Each run gets its
    /// own output subdirectory when the suite has one.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let protocols = self
            .protocols
            .clone()
            .unwrap_or_else(|| vec![self.base.protocol]);
        let mut configs = Vec::new();
        for &protocol in &protocols {
            for &method in &self.methods {
                for &horizon in &self.horizons {
                    for &seed in &self.seeds {
                        let mut config = self.base.clone();
                        config.protocol = protocol;
                        config.method = method;
                        config.horizon = horizon;
                        config.seed = seed;
                        config.out_dir = self.out_dir.as_ref().map(|dir| {
                            dir.join(format!(
                                "run-{}-h{}-{}-s{}",
                                method.label(),
                                horizon,
                                protocol_label(protocol),
                                seed
                            ))
                        });
                        configs.push(config);
                    }
                }
            }
        }
        configs
    }
}

/// Kebab-case protocol name used in file names, tables, and CLI output.
pub fn protocol_label(protocol: ProtocolKind) -> &'static str {
    match protocol {
        ProtocolKind::Standard => "standard",
        ProtocolKind::DelayedFeedback => "delayed-feedback",
    }
}

/// One suite table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub method: Method,
    pub horizon: usize,
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub n_rounds: usize,
}

/// Seed-averaged metrics for one (method, horizon, protocol) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub method: Method,
    pub horizon: usize,
    pub protocol: ProtocolKind,
    pub n_seeds: usize,
    pub mean_mse: f64,
    pub mean_mae: f64,
}

/// A run that failed, identified by its grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFailure {
    pub method: Method,
    pub horizon: usize,
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub error: String,
}

/// Sorted rows, per-cell means, and recorded failures of one suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub rows: Vec<SuiteRow>,
    pub summary: Vec<SuiteSummary>,
    pub failures: Vec<SuiteFailure>,
}

fn suite_sort_key(method: Method, horizon: usize, protocol: ProtocolKind, seed: u64)
    -> (&'static str, usize, &'static str, u64)
{
    (method.label(), horizon, protocol_label(protocol), seed)
}

/// Runs every config on a private thread pool (`parallelism` workers,
/// capped by `DRIFT_FORGE_THREADS`), recording failures without stopping
/// the rest. Output ordering is fixed by the grid coordinates, so the
/// aggregation tolerates any completion order.
pub fn run_suite(configs: &[ExperimentConfig], parallelism: usize) -> Result<SuiteOutcome> {
    let mut threads = parallelism.max(1);
    if let Ok(cap) = std::env::var("DRIFT_FORGE_THREADS") {
        let cap: usize = cap.parse().map_err(|_| {
            Error::Config(format!("DRIFT_FORGE_THREADS must be a positive integer, got {cap:?}"))
        })?;
        if cap == 0 {
            return Err(Error::Config("DRIFT_FORGE_THREADS must be >= 1".into()));
        }
        threads = threads.min(cap);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("could not build the suite thread pool: {e}")))?;

    let results: Vec<(ExperimentConfig, Result<(ReportRecord, LossTrace)>)> = pool.install(|| {
        configs
            .par_iter()
            .map(|config| (config.clone(), run_experiment(config)))
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (config, outcome) in results {
        match outcome {
            Ok((report, _)) => rows.push(SuiteRow {
                method: config.method,
                horizon: config.horizon,
                protocol: config.protocol,
                seed: config.seed,
                mse: report.accumulated_mse,
                mae: report.accumulated_mae,
                n_rounds: report.n_rounds,
            }),
            Err(err) => failures.push(SuiteFailure {
                method: config.method,
                horizon: config.horizon,
                protocol: config.protocol,
                seed: config.seed,
                error: err.to_string(),
            }),
        }
    }
    rows.sort_by_key(|r| suite_sort_key(r.method, r.horizon, r.protocol, r.seed));
    failures.sort_by_key(|f| suite_sort_key(f.method, f.horizon, f.protocol, f.seed));

    let mut summary: Vec<SuiteSummary> = Vec::new();
    for row in &rows {
        match summary.last_mut() {
            Some(cell)
                if cell.method == row.method
                    && cell.horizon == row.horizon
                    && cell.protocol == row.protocol =>
            {
                cell.n_seeds += 1;
                cell.mean_mse += row.mse;
                cell.mean_mae += row.mae;
            }
            _ => summary.push(SuiteSummary {
                method: row.method,
                horizon: row.horizon,
                protocol: row.protocol,
                n_seeds: 1,
                mean_mse: row.mse,
                mean_mae: row.mae,
            }),
        }
    }
    for cell in &mut summary {
        cell.mean_mse /= cell.n_seeds as f64;
        cell.mean_mae /= cell.n_seeds as f64;
    }

    Ok(SuiteOutcome { rows, summary, failures })
}

/// Writes the per-run table as CSV.
pub fn emit_suite_rows(rows: &[SuiteRow], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes the per-cell summary table as CSV.
pub fn emit_suite_summary(summary: &[SuiteSummary], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for cell in summary {
        writer.serialize(cell)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::RegimeSpec;
    use proptest::prelude::*;

    fn stationary_spec(seed: u64, length: usize) -> SyntheticSpec {
        SyntheticSpec {
            channels: 2,
            seed,
            regimes: vec![RegimeSpec {
                length,
                ar_coefficients: vec![vec![0.5], vec![0.4]],
                noise_scale: 0.1,
                level_offset: 1.0,
            }],
        }
    }

    fn shifted_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            channels: 2,
            seed,
            regimes: vec![
                RegimeSpec {
                    length: 140,
                    ar_coefficients: vec![vec![0.4], vec![0.3]],
                    noise_scale: 0.05,
                    level_offset: 0.0,
                },
                RegimeSpec {
                    length: 140,
                    ar_coefficients: vec![vec![0.4], vec![0.3]],
                    noise_scale: 0.05,
                    level_offset: 3.0,
                },
            ],
        }
    }

    fn base_config(data: SyntheticSpec) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic(data),
            lookback: 16,
            horizon: 1,
            warm_fraction: 0.25,
            protocol: ProtocolKind::Standard,
            method: Method::D3a,
            model: ModelKind::Linear,
            online_lr: 1e-3,
            pretrain: true,
            window_len: 16,
            significance: 0.01,
            refresh_interval: None,
            prev_capacity: 512,
            adapt: AdaptConfig::default(),
            seed: 0,
            out_dir: None,
        }
    }

    fn scrubbed(mut report: ReportRecord) -> ReportRecord {
        report.wall_time_secs = 0.0;
        for event in &mut report.adaptation_events {
            event.wall_time_secs = 0.0;
        }
        report
    }

    #[test]
    fn accumulate_averages_the_rows() {
        let rows: Vec<TraceRow> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| TraceRow {
                round: i,
                mse: v,
                mae: v / 2.0,
                cumulative_mean_mse: 0.0,
                cumulative_mean_mae: 0.0,
                verdict: VerdictKind::NoDrift,
            })
            .collect();
        let (mse, mae) = accumulate(&LossTrace { rows }).unwrap();
        assert_eq!(mse, 2.0);
        assert_eq!(mae, 1.0);
    }

    #[test]
    fn accumulate_rejects_an_empty_trace() {
        assert!(accumulate(&LossTrace::default()).is_err());
    }

    #[test]
    fn single_round_accumulates_to_itself() {
        let trace = LossTrace {
            rows: vec![TraceRow {
                round: 0,
                mse: 0.5,
                mae: 0.25,
                cumulative_mean_mse: 0.5,
                cumulative_mean_mae: 0.25,
                verdict: VerdictKind::NoDrift,
            }],
        };
        assert_eq!(accumulate(&trace).unwrap(), (0.5, 0.25));
    }

    #[test]
    fn subseed_streams_do_not_collide() {
        let mut seen = std::collections::HashSet::new();
        for master in [0u64, 1, 42, u64::MAX] {
            for tag in 0..100u64 {
                assert!(seen.insert(subseed(master, tag)));
            }
        }
    }

    #[test]
    fn method_modes_are_fixed() {
        assert_eq!(Method::Naive.adapt_mode(), None);
        assert_eq!(Method::D3a.adapt_mode(), Some(AdaptMode::Full));
        assert_eq!(Method::D3aStar.adapt_mode(), Some(AdaptMode::RegressorOnly));
    }

    #[test]
    fn config_rejects_bad_fields_before_any_computation() {
        let mut config = base_config(stationary_spec(1, 400));
        config.lookback = 0;
        assert!(config.validate().is_err());

        let mut config = base_config(stationary_spec(1, 400));
        config.warm_fraction = 1.0;
        assert!(config.validate().is_err());

        let mut config = base_config(stationary_spec(1, 400));
        config.significance = 0.0;
        assert!(config.validate().is_err());

        let mut config = base_config(stationary_spec(1, 400));
        config.model = ModelKind::Mlp { hidden_width: 0 };
        assert!(config.validate().is_err());
    }

    #[test]
    fn naive_and_quiet_d3a_traces_are_identical() {
        // With a tiny significance, a stream short enough that the z
        // statistic's standard error stays wide, and a huge refresh
        // interval, the detector never fires and the adaptive loop
        // degenerates to the naive one.
        let mut quiet = base_config(stationary_spec(7, 108));
        quiet.significance = 1e-4;
        quiet.refresh_interval = Some(1_000_000);
        let mut naive = quiet.clone();
        naive.method = Method::Naive;

        let (quiet_report, quiet_trace) = run_experiment(&quiet).unwrap();
        let (naive_report, naive_trace) = run_experiment(&naive).unwrap();

        assert!(quiet_report.alarms.is_empty());
        assert!(quiet_report.scheduled_refreshes.is_empty());
        assert!(quiet_report.adaptation_events.is_empty());
        assert_eq!(quiet_trace.rows.len(), naive_trace.rows.len());
        for (q, n) in quiet_trace.rows.iter().zip(&naive_trace.rows) {
            assert_eq!(q, n);
        }
        assert_eq!(quiet_report.accumulated_mse, naive_report.accumulated_mse);
    }

    #[test]
    fn reports_and_traces_are_deterministic() {
        let config = base_config(shifted_spec(11));
        let (r1, t1) = run_experiment(&config).unwrap();
        let (r2, t2) = run_experiment(&config).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(scrubbed(r1), scrubbed(r2));
    }

    #[test]
    fn report_metrics_match_the_trace() {
        let (report, trace) = run_experiment(&base_config(shifted_spec(3))).unwrap();
        let (mse, mae) = accumulate(&trace).unwrap();
        assert!((report.accumulated_mse - mse).abs() < 1e-12);
        assert!((report.accumulated_mae - mae).abs() < 1e-12);
        assert_eq!(report.n_rounds, trace.rows.len());
        assert_eq!(report.n_rounds_issued, report.n_rounds + report.n_unrevealed);
    }

    #[test]
    fn cumulative_columns_are_running_means() {
        let (_, trace) = run_experiment(&base_config(shifted_spec(5))).unwrap();
        let mut sum_mse = 0.0;
        let mut sum_mae = 0.0;
        for (i, row) in trace.rows.iter().enumerate() {
            sum_mse += row.mse;
            sum_mae += row.mae;
            let n = (i + 1) as f64;
            assert!((row.cumulative_mean_mse - sum_mse / n).abs() < 1e-12);
            assert!((row.cumulative_mean_mae - sum_mae / n).abs() < 1e-12);
        }
    }

    #[test]
    fn level_shift_raises_an_alarm_promptly() {
        // The level shift is at absolute step 140; the warm split ends at
        // 70, so the first online round whose target lies in the new regime
        // is 140 - 70 - lookback = 54. The pre-shift stretch is kept short
        // because the z statistic's standard error shrinks with the buffer
        // length, which would otherwise let stationary fluctuations cross
        // any fixed threshold eventually.
        let mut hits = 0;
        for seed in 0..100 {
            let mut config = base_config(shifted_spec(1000 + seed));
            config.significance = 1e-6;
            config.refresh_interval = Some(1_000_000);
            config.seed = seed;
            let (report, _) = run_experiment(&config).unwrap();
            let shift_round = 140 - 70 - config.lookback;
            if let Some(first) = report.alarms.first() {
                if first.round >= shift_round
                    && first.round <= shift_round + 2 * config.window_len
                {
                    hits += 1;
                }
            }
        }
        assert!(hits >= 95, "only {hits}/100 first alarms landed in the window");
    }

    #[test]
    fn d3a_star_always_adapts_the_regressor_only() {
        let mut config = base_config(shifted_spec(21));
        config.method = Method::D3aStar;
        config.significance = 0.001;
        let (report, _) = run_experiment(&config).unwrap();
        assert!(!report.adaptation_events.is_empty());
        for event in &report.adaptation_events {
            assert_eq!(event.mode, AdaptMode::RegressorOnly);
        }
    }

    #[test]
    fn delayed_feedback_trains_once_per_horizon() {
        let mut config = base_config(stationary_spec(9, 600));
        config.protocol = ProtocolKind::DelayedFeedback;
        config.horizon = 24;
        let (report, trace) = run_experiment(&config).unwrap();
        let floor = report.n_rounds_issued / 24;
        assert!(
            (report.n_training_updates as i64 - floor as i64).abs() <= 1,
            "updates {} vs floor {floor}",
            report.n_training_updates
        );
        assert_eq!(report.n_rounds, trace.rows.len());
        assert!(report.n_unrevealed < 24 + 23);
        let rounds: Vec<usize> = trace.rows.iter().map(|r| r.round).collect();
        let expected: Vec<usize> = (0..rounds.len()).collect();
        assert_eq!(rounds, expected);
    }

    #[test]
    fn delayed_feedback_never_feeds_the_detector_early() {
        // Every scored round's target horizon must have fully elapsed by
        // the round the check runs in: reveal round >= issue + H - 1.
        let mut config = base_config(stationary_spec(13, 600));
        config.protocol = ProtocolKind::DelayedFeedback;
        config.horizon = 8;
        let (report, _) = run_experiment(&config).unwrap();
        assert!(report.n_training_updates >= 1);
        let (_, trace) = run_experiment(&config).unwrap();
        for row in &trace.rows {
            if row.verdict != VerdictKind::NoDrift {
                assert_eq!((row.round + config.horizon) % config.horizon, 0);
            }
        }
    }

    #[test]
    fn emitted_artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(shifted_spec(17));
        config.out_dir = Some(dir.path().to_path_buf());
        let (report, trace) = run_experiment(&config).unwrap();

        let report_back = read_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(report_back, report);
        let trace_back = read_trace(&dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace_back, trace);
        assert!(dir.path().join("verdicts.jsonl").exists());
        assert!(dir.path().join("model.txt").exists());
    }

    #[test]
    fn suite_grid_has_full_cardinality_and_is_deterministic() {
        let suite = SuiteConfig {
            base: base_config(stationary_spec(1, 400)),
            methods: vec![Method::Naive, Method::D3a],
            horizons: vec![1],
            seeds: vec![0, 1, 2],
            protocols: None,
            parallelism: Some(2),
            out_dir: None,
        };
        let configs = suite.expand();
        assert_eq!(configs.len(), 6);
        let first = run_suite(&configs, 2).unwrap();
        assert_eq!(first.rows.len(), 6);
        assert!(first.failures.is_empty());
        let second = run_suite(&configs, 4).unwrap();
        assert_eq!(first.rows, second.rows);
        assert_eq!(first.summary, second.summary);
    }

    #[test]
    fn suite_summary_means_match_their_rows() {
        let suite = SuiteConfig {
            base: base_config(stationary_spec(2, 400)),
            methods: vec![Method::Naive],
            horizons: vec![1],
            seeds: vec![3, 4, 5],
            protocols: None,
            parallelism: Some(3),
            out_dir: None,
        };
        let outcome = run_suite(&suite.expand(), 3).unwrap();
        assert_eq!(outcome.summary.len(), 1);
        let cell = &outcome.summary[0];
        assert_eq!(cell.n_seeds, 3);
        let mean: f64 = outcome.rows.iter().map(|r| r.mse).sum::<f64>() / 3.0;
        assert!((cell.mean_mse - mean).abs() < 1e-12);
    }

    #[test]
    fn suite_records_failures_and_continues() {
        let good = base_config(stationary_spec(1, 400));
        let mut bad = good.clone();
        // A warm split this small cannot hold one look-back plus horizon.
        bad.warm_fraction = 0.01;
        bad.seed = 99;
        let outcome = run_suite(&[good, bad], 2).unwrap();
        assert_eq!(outcome.rows.len(), 1);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].seed, 99);
        assert!(!outcome.failures[0].error.is_empty());
    }

    #[test]
    fn suite_csv_emission_round_trips_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![SuiteRow {
            method: Method::D3aStar,
            horizon: 24,
            protocol: ProtocolKind::DelayedFeedback,
            seed: 7,
            mse: 0.125,
            mae: 0.25,
            n_rounds: 100,
        }];
        let path = dir.path().join("suite.csv");
        emit_suite_rows(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,horizon,protocol,seed,mse,mae,n_rounds"));
        assert!(text.contains("d3a-star,24,delayed-feedback,7,0.125,0.25,100"));
    }

    #[test]
    fn toml_configs_parse_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            r#"
seed = 5

[data.synthetic]
channels = 2
seed = 1

[[data.synthetic.regimes]]
length = 400
ar_coefficients = [[0.5], [0.4]]
noise_scale = 0.1
level_offset = 0.0
"#,
        )
        .unwrap();
        let config = ExperimentConfig::from_toml_file(&path).unwrap();
        assert_eq!(config.lookback, 60);
        assert_eq!(config.horizon, 24);
        assert_eq!(config.method, Method::D3a);
        assert_eq!(config.seed, 5);

        std::fs::write(&path, "unknown_field = 1\n").unwrap();
        assert!(ExperimentConfig::from_toml_file(&path).is_err());
    }

    proptest! {
        #[test]
        fn accumulate_is_permutation_invariant(values in proptest::collection::vec(0.0f64..10.0, 1..40), swap_a in 0usize..40, swap_b in 0usize..40) {
            let rows: Vec<TraceRow> = values.iter().enumerate().map(|(i, &v)| TraceRow {
                round: i,
                mse: v,
                mae: v,
                cumulative_mean_mse: 0.0,
                cumulative_mean_mae: 0.0,
                verdict: VerdictKind::NoDrift,
            }).collect();
            let mut shuffled = rows.clone();
            let a = swap_a % shuffled.len();
            let b = swap_b % shuffled.len();
            shuffled.swap(a, b);
            let (m1, _) = accumulate(&LossTrace { rows }).unwrap();
            let (m2, _) = accumulate(&LossTrace { rows: shuffled }).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12);
        }
    }
}
