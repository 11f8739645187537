//! Raw series representation, ingestion, synthetic drifting streams,
//! warm-up normalization, windowing, and the evaluation protocols.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to per-channel standard deviations so constant channels
/// normalize to zero instead of dividing by zero.
pub const EPS_STD: f64 = 1e-8;

/// Where a series came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesOrigin {
    CsvFile,
    Synthetic,
}

/// A T x M matrix of observations: one row per time step, one column per
/// channel. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    values: DMatrix<f64>,
    channel_names: Vec<String>,
    origin: SeriesOrigin,
}

impl MultivariateSeries {
    /// Builds a series, validating finiteness and shape.
    pub fn new(
        values: DMatrix<f64>,
        channel_names: Vec<String>,
        origin: SeriesOrigin,
    ) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Config("series needs at least one channel".into()));
        }
        if channel_names.len() != values.ncols() {
            return Err(Error::Config(format!(
                "{} channel names for {} columns",
                channel_names.len(),
                values.ncols()
            )));
        }
        if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (i % values.nrows(), i / values.nrows());
            return Err(Error::Numeric(format!(
                "non-finite value at row {r}, column {c}"
            )));
        }
        Ok(Self {
            values,
            channel_names,
            origin,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn origin(&self) -> SeriesOrigin {
        self.origin
    }
}

/// One round's slice of the stream: an M x L look-back block and the
/// M x H target block immediately following it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// M x L look-back; column l holds all channels at lag offset l.
    pub lookback: DMatrix<f64>,
    /// M x H target; column h holds all channels at horizon offset h.
    pub target: DMatrix<f64>,
    /// The round index this pair was issued at.
    pub step_index: usize,
}

/// Per-channel affine normalizer fitted on the warm split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits per-channel mean and sample (n-1) standard deviation, flooring the
/// deviation at [`EPS_STD`].
pub fn fit_normalizer(warm: &MultivariateSeries) -> Result<Normalizer> {
    let t = warm.n_steps();
    if t == 0 {
        return Err(Error::Config("cannot fit a normalizer on an empty series".into()));
    }
    let m = warm.n_channels();
    let mut mean = vec![0.0; m];
    let mut std = vec![0.0; m];
    for j in 0..m {
        let col = warm.values.column(j);
        let mu = col.sum() / t as f64;
        let var = if t >= 2 {
            col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (t - 1) as f64
        } else {
            0.0
        };
        mean[j] = mu;
        std[j] = var.sqrt().max(EPS_STD);
    }
    Ok(Normalizer { mean, std })
}

impl Normalizer {
    /// Subtracts the per-channel mean and divides by the (floored) std.
    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.transform(series, false)
    }

    /// Inverse of [`Normalizer::apply`].
    pub fn invert(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.transform(series, true)
    }

    fn transform(&self, series: &MultivariateSeries, inverse: bool) -> Result<MultivariateSeries> {
        if self.mean.len() != series.n_channels() {
            return Err(Error::Config(format!(
                "normalizer fitted on {} channels, series has {}",
                self.mean.len(),
                series.n_channels()
            )));
        }
        let mut values = series.values.clone();
        for j in 0..series.n_channels() {
            let (mu, sd) = (self.mean[j], self.std[j]);
            for v in values.column_mut(j).iter_mut() {
                *v = if inverse { *v * sd + mu } else { (*v - mu) / sd };
            }
        }
        MultivariateSeries::new(values, series.channel_names.clone(), series.origin)
    }
}

/// One piecewise-stationary segment of a synthetic stream. Each channel
/// follows its own AR recursion around `level_offset` with i.i.d. Gaussian
/// innovations of scale `noise_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub length: usize,
    /// One coefficient vector per channel.
    pub ar_coefficients: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub level_offset: f64,
}

/// Declarative description of a piecewise-stationary synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub seed: u64,
    pub regimes: Vec<RegimeSpec>,
}

/// Spectral radius of the companion matrix of an AR coefficient vector;
/// stability requires it to be strictly below 1.
fn companion_spectral_radius(coeffs: &[f64]) -> f64 {
    let p = coeffs.len();
    if p == 0 {
        return 0.0;
    }
    let mut c = DMatrix::<f64>::zeros(p, p);
    for (k, a) in coeffs.iter().enumerate() {
        c[(0, k)] = *a;
    }
    for i in 1..p {
        c[(i, i - 1)] = 1.0;
    }
    c.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

impl SyntheticSpec {
    /// Validates channel counts, coefficient arity, finiteness, and AR
    /// stability for every regime.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("at least one regime is required".into()));
        }
        for (i, reg) in self.regimes.iter().enumerate() {
            if reg.length == 0 {
                return Err(Error::Config(format!("regime {i} has zero length")));
            }
            if reg.ar_coefficients.len() != self.channels {
                return Err(Error::Config(format!(
                    "regime {i} defines {} coefficient vectors for {} channels",
                    reg.ar_coefficients.len(),
                    self.channels
                )));
            }
            if !reg.noise_scale.is_finite()
                || reg.noise_scale < 0.0
                || !reg.level_offset.is_finite()
            {
                return Err(Error::Config(format!(
                    "regime {i} has a non-finite or negative parameter"
                )));
            }
            for (j, coeffs) in reg.ar_coefficients.iter().enumerate() {
                if coeffs.iter().any(|a| !a.is_finite()) {
                    return Err(Error::Config(format!(
                        "regime {i}, channel {j}: non-finite AR coefficient"
                    )));
                }
                let radius = companion_spectral_radius(coeffs);
                if radius >= 1.0 {
                    return Err(Error::Config(format!(
                        "regime {i}, channel {j}: unstable AR coefficients \
                         (companion spectral radius {radius:.4} >= 1)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_length(&self) -> usize {
        self.regimes.iter().map(|r| r.length).sum()
    }

    /// Loads a spec from a TOML file.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SyntheticSpec = toml::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Generates a piecewise-stationary multivariate AR stream. Each channel j
/// in a regime with level mu follows
/// `y[t] = mu + sum_k a_jk * (y[t-k-1] - mu) + noise_scale * eps`,
/// continuing from the previous regime's tail values; history before the
/// first step is the first regime's level. Identical (spec, seed) inputs
/// yield bit-identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultivariateSeries> {
    spec.validate()?;
    let total = spec.total_length();
    let m = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = DMatrix::<f64>::zeros(total, m);
    let base_level = spec.regimes[0].level_offset;

    let mut t = 0usize;
    for reg in &spec.regimes {
        for _ in 0..reg.length {
            for j in 0..m {
                let eps: f64 = rng.sample(StandardNormal);
                let mut acc = reg.level_offset;
                for (k, a) in reg.ar_coefficients[j].iter().enumerate() {
                    let prev = match t.checked_sub(k + 1) {
                        Some(idx) => values[(idx, j)],
                        None => base_level,
                    };
                    acc += a * (prev - reg.level_offset);
                }
                values[(t, j)] = acc + reg.noise_scale * eps;
            }
            t += 1;
        }
    }

    let names = (0..m).map(|j| format!("c{j}")).collect();
    MultivariateSeries::new(values, names, SeriesOrigin::Synthetic)
}

/// Loads a comma-separated series. With `has_header`, the first line names
/// the channels and a leading column named `date` or `timestamp`
/// (case-insensitive) is dropped. Every remaining cell must parse as a
/// finite real; violations are reported with their 1-based line number.
pub fn load_csv(path: &Path, has_header: bool) -> Result<MultivariateSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)?;

    let mut skip_first = false;
    let mut names: Vec<String> = Vec::new();
    if has_header {
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .clone();
        if headers.is_empty() {
            return Err(Error::Parse { line: 1, msg: "empty header row".into() });
        }
        let first = headers.get(0).unwrap_or("").trim().to_ascii_lowercase();
        skip_first = first == "date" || first == "timestamp";
        let start = usize::from(skip_first);
        names = headers.iter().skip(start).map(|h| h.trim().to_string()).collect();
        if names.is_empty() {
            return Err(Error::Parse { line: 1, msg: "no numeric channels in header".into() });
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(rows.len() + 1 + usize::from(has_header));
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(rows.len() + 1 + usize::from(has_header));
        let start = usize::from(skip_first);
        if record.len() <= start {
            return Err(Error::Parse { line, msg: "row has no numeric cells".into() });
        }
        let mut row = Vec::with_capacity(record.len() - start);
        for cell in record.iter().skip(start) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cell {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("cell {cell:?} is not finite"),
                });
            }
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {w} cells, found {}", row.len()),
                });
            }
            _ => {}
        }
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(Error::Parse { line: 1, msg: "file contains no data rows".into() });
    }
    let m = width.unwrap();
    if names.is_empty() {
        names = (0..m).map(|j| format!("c{j}")).collect();
    }
    if names.len() != m {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header names {} channels, rows have {m}", names.len()),
        });
    }
    let values = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
    MultivariateSeries::new(values, names, SeriesOrigin::CsvFile)
}

/// Writes a series as CSV with a header of channel names. Values round-trip
/// exactly through [`load_csv`].
pub fn save_csv(series: &MultivariateSeries, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer
        .write_record(series.channel_names())
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for r in 0..series.n_steps() {
        let row: Vec<String> = (0..series.n_channels())
            .map(|c| {
                let mut buf = ryu_format(series.values[(r, c)]);
                if buf.is_empty() {
                    buf = "0".into();
                }
                buf
            })
            .collect();
        writer
            .write_record(&row)
            .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Shortest decimal representation that parses back to the same f64.
fn ryu_format(v: f64) -> String {
    let mut s = format!("{v}");
    if s.parse::<f64>() != Ok(v) {
        s = format!("{v:.17}");
    }
    s
}

/// Splits a series into warm and online parts at `floor(warm_fraction * T)`
/// rows. Both parts must be long enough to hold at least one (L, H) window.
pub fn split_warmup(
    series: &MultivariateSeries,
    warm_fraction: f64,
    lookback: usize,
    horizon: usize,
) -> Result<(MultivariateSeries, MultivariateSeries)> {
    if !(warm_fraction > 0.0 && warm_fraction < 1.0) {
        return Err(Error::Config(format!(
            "warm_fraction must be in (0, 1), got {warm_fraction}"
        )));
    }
    let t = series.n_steps();
    let warm_rows = (warm_fraction * t as f64).floor() as usize;
    let min = lookback + horizon;
    if warm_rows < min {
        return Err(Error::Config(format!(
            "warm split has {warm_rows} rows, need at least {min}"
        )));
    }
    if t - warm_rows < min {
        return Err(Error::Config(format!(
            "online split has {} rows, need at least {min}",
            t - warm_rows
        )));
    }
    let warm = series.values.rows(0, warm_rows).into_owned();
    let online = series.values.rows(warm_rows, t - warm_rows).into_owned();
    Ok((
        MultivariateSeries::new(warm, series.channel_names.clone(), series.origin)?,
        MultivariateSeries::new(online, series.channel_names.clone(), series.origin)?,
    ))
}

/// Extracts the round-`t` window: look-back rows `[t, t+L)` and target rows
/// `[t+L, t+L+H)`, both transposed to channel-major (M x steps) layout.
pub fn window_at(
    series: &MultivariateSeries,
    t: usize,
    lookback: usize,
    horizon: usize,
) -> Result<WindowPair> {
    if t + lookback + horizon > series.n_steps() {
        return Err(Error::Bounds(format!(
            "window at round {t} needs rows up to {}, series has {}",
            t + lookback + horizon,
            series.n_steps()
        )));
    }
    let x = series.values.rows(t, lookback).transpose();
    let y = series.values.rows(t + lookback, horizon).transpose();
    Ok(WindowPair { lookback: x, target: y, step_index: t })
}

/// Evaluation protocol: either ground truth is revealed in the same round
/// (standard) or only once the full forecast horizon has elapsed (delayed),
/// in which case revelations arrive in batches once every H rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Standard,
    DelayedFeedback,
}

/// Tracks pending (issued but unrevealed) pairs under delayed feedback.
#[derive(Debug, Clone)]
pub struct ProtocolState {
    kind: ProtocolKind,
    horizon: usize,
    pending: VecDeque<(usize, WindowPair)>,
    next_round: usize,
}

impl ProtocolState {
    pub fn new(kind: ProtocolKind, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        Ok(Self { kind, horizon, pending: VecDeque::new(), next_round: 0 })
    }

    pub fn kind(&self) -> ProtocolKind {
        self.kind
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Advances one round with the pair issued this round and returns the
    /// pairs revealed at the end of it, oldest first.
    ///
    /// Standard mode reveals the issued pair immediately. Delayed mode
    /// enqueues it; at the end of every H-th round it reveals every pending
    /// pair whose full target horizon has elapsed (pair issued at round `i`
    /// becomes revealable at the end of round `i + H - 1`, since exactly one
    /// new observation arrives per round). With H = 1 this degenerates to
    /// the standard protocol.
    pub fn advance(&mut self, round: usize, issued: WindowPair) -> Result<Vec<(usize, WindowPair)>> {
        if round != self.next_round {
            return Err(Error::Bounds(format!(
                "rounds must advance by exactly 1: expected {}, got {round}",
                self.next_round
            )));
        }
        self.next_round += 1;
        match self.kind {
            ProtocolKind::Standard => Ok(vec![(round, issued)]),
            ProtocolKind::DelayedFeedback => {
                self.pending.push_back((round, issued));
                let mut revealed = Vec::new();
                if (round + 1).is_multiple_of(self.horizon) {
                    while let Some((issue_round, _)) = self.pending.front() {
                        if issue_round + self.horizon - 1 <= round {
                            revealed.push(self.pending.pop_front().unwrap());
                        } else {
                            break;
                        }
                    }
                }
                Ok(revealed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn series_from(rows: &[&[f64]]) -> MultivariateSeries {
        let m = rows[0].len();
        let values = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
        let names = (0..m).map(|j| format!("c{j}")).collect();
        MultivariateSeries::new(values, names, SeriesOrigin::Synthetic).unwrap()
    }

    fn column_series(vals: &[f64]) -> MultivariateSeries {
        let rows: Vec<&[f64]> = Vec::new();
        drop(rows);
        let values = DMatrix::from_fn(vals.len(), 1, |r, _| vals[r]);
        MultivariateSeries::new(values, vec!["c0".into()], SeriesOrigin::Synthetic).unwrap()
    }

    #[test]
    fn load_csv_parses_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.csv");
        std::fs::write(&path, "a,b\n1,2\n3,4\n").unwrap();
        let s = load_csv(&path, true).unwrap();
        assert_eq!(s.n_steps(), 2);
        assert_eq!(s.n_channels(), 2);
        assert_eq!(s.channel_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(s.values()[(0, 0)], 1.0);
        assert_eq!(s.values()[(1, 1)], 4.0);
        assert_eq!(s.origin(), SeriesOrigin::CsvFile);
    }

    #[test]
    fn load_csv_rejects_nan_cell_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n1,NaN\n3,4\n").unwrap();
        let err = load_csv(&path, true).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_rejects_wrong_arity_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        let err = load_csv(&path, true).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "a,b\n").unwrap();
        assert!(load_csv(&path, true).is_err());
    }

    #[test]
    fn load_csv_drops_leading_date_column() {
        // Five-row fixture in the style of hourly electricity datasets:
        // a date column followed by 7 numeric channels.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ett.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT").unwrap();
        for i in 0..5 {
            writeln!(
                f,
                "2016-07-01 0{i}:00:00,{},{},{},{},{},{},{}",
                5.8 + i as f64,
                2.0,
                1.6,
                0.4,
                4.2,
                1.3,
                30.5 - i as f64
            )
            .unwrap();
        }
        let s = load_csv(&path, true).unwrap();
        assert_eq!(s.n_channels(), 7);
        assert_eq!(s.n_steps(), 5);
        assert_eq!(s.channel_names()[0], "HUFL");
        assert_eq!(s.channel_names()[6], "OT");
    }

    #[test]
    fn save_csv_round_trips_values_exactly() {
        let spec = SyntheticSpec {
            channels: 2,
            seed: 11,
            regimes: vec![RegimeSpec {
                length: 40,
                ar_coefficients: vec![vec![0.4], vec![-0.3, 0.1]],
                noise_scale: 0.7,
                level_offset: 1.25,
            }],
        };
        let s = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.csv");
        save_csv(&s, &path).unwrap();
        let back = load_csv(&path, true).unwrap();
        assert_eq!(s.values(), back.values());
        assert_eq!(s.channel_names(), back.channel_names());
    }

    #[test]
    fn synthetic_degenerate_regime_is_constant() {
        let spec = SyntheticSpec {
            channels: 1,
            seed: 3,
            regimes: vec![RegimeSpec {
                length: 25,
                ar_coefficients: vec![vec![0.0]],
                noise_scale: 0.0,
                level_offset: 4.5,
            }],
        };
        let s = generate_synthetic(&spec).unwrap();
        assert!(s.values().iter().all(|v| *v == 4.5));
    }

    #[test]
    fn synthetic_level_shift_moves_segment_mean() {
        let len = 600;
        let noise = 0.3;
        let spec = SyntheticSpec {
            channels: 1,
            seed: 42,
            regimes: vec![
                RegimeSpec {
                    length: len,
                    ar_coefficients: vec![vec![0.3]],
                    noise_scale: noise,
                    level_offset: 0.0,
                },
                RegimeSpec {
                    length: len,
                    ar_coefficients: vec![vec![0.3]],
                    noise_scale: noise,
                    level_offset: 10.0,
                },
            ],
        };
        let s = generate_synthetic(&spec).unwrap();
        let first: f64 = (0..len).map(|t| s.values()[(t, 0)]).sum::<f64>() / len as f64;
        let second: f64 =
            (len..2 * len).map(|t| s.values()[(t, 0)]).sum::<f64>() / len as f64;
        let tol = 3.0 * noise / (len as f64).sqrt();
        assert!(
            ((second - first) - 10.0).abs() < tol,
            "segment mean difference {} not within {tol} of 10",
            second - first
        );
    }

    #[test]
    fn synthetic_is_deterministic_under_seed() {
        let spec = SyntheticSpec {
            channels: 3,
            seed: 99,
            regimes: vec![RegimeSpec {
                length: 128,
                ar_coefficients: vec![vec![0.5, -0.2], vec![0.1], vec![]],
                noise_scale: 1.0,
                level_offset: -2.0,
            }],
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn synthetic_rejects_unstable_coefficients() {
        let spec = SyntheticSpec {
            channels: 1,
            seed: 0,
            regimes: vec![RegimeSpec {
                length: 50,
                ar_coefficients: vec![vec![1.01]],
                noise_scale: 1.0,
                level_offset: 0.0,
            }],
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn split_warmup_quarter_of_100() {
        let vals: Vec<f64> = (0..100).map(|v| v as f64).collect();
        let s = column_series(&vals);
        let (warm, online) = split_warmup(&s, 0.25, 10, 5).unwrap();
        assert_eq!(warm.n_steps(), 25);
        assert_eq!(online.n_steps(), 75);
        assert_eq!(warm.values()[(24, 0)], 24.0);
        assert_eq!(online.values()[(0, 0)], 25.0);
    }

    #[test]
    fn split_warmup_even_halves() {
        let vals: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let s = column_series(&vals);
        let (warm, online) = split_warmup(&s, 0.5, 2, 1).unwrap();
        assert_eq!(warm.n_steps(), 4);
        assert_eq!(online.n_steps(), 4);
    }

    #[test]
    fn split_warmup_rejects_short_warm_part() {
        let vals: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let s = column_series(&vals);
        assert!(split_warmup(&s, 0.1, 2, 1).is_err());
    }

    #[test]
    fn normalizer_constant_channel_floors_std() {
        let s = column_series(&[2.0, 2.0, 2.0]);
        let norm = fit_normalizer(&s).unwrap();
        assert_eq!(norm.mean[0], 2.0);
        assert_eq!(norm.std[0], EPS_STD);
        let applied = norm.apply(&s).unwrap();
        assert!(applied.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalizer_two_point_channel_matches_hand_arithmetic() {
        let s = column_series(&[0.0, 2.0]);
        let norm = fit_normalizer(&s).unwrap();
        assert_eq!(norm.mean[0], 1.0);
        assert!((norm.std[0] - 2.0_f64.sqrt()).abs() < 1e-15);
        let applied = norm.apply(&s).unwrap();
        let expected = 1.0 / 2.0_f64.sqrt();
        assert!((applied.values()[(0, 0)] + expected).abs() < 1e-15);
        assert!((applied.values()[(1, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn window_at_slices_directly() {
        let s = column_series(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let w = window_at(&s, 0, 2, 1).unwrap();
        assert_eq!(w.lookback.as_slice(), &[0.0, 1.0]);
        assert_eq!(w.target.as_slice(), &[2.0]);
        let w2 = window_at(&s, 2, 2, 1).unwrap();
        assert_eq!(w2.lookback.as_slice(), &[2.0, 3.0]);
        assert_eq!(w2.target.as_slice(), &[4.0]);
        assert!(window_at(&s, 3, 2, 1).is_err());
    }

    #[test]
    fn window_layout_is_channel_major() {
        let s = series_from(&[&[1.0, 10.0], &[2.0, 20.0], &[3.0, 30.0], &[4.0, 40.0]]);
        let w = window_at(&s, 0, 3, 1).unwrap();
        assert_eq!(w.lookback.nrows(), 2);
        assert_eq!(w.lookback.ncols(), 3);
        assert_eq!(w.lookback[(0, 2)], 3.0);
        assert_eq!(w.lookback[(1, 0)], 10.0);
        assert_eq!(w.target[(1, 0)], 40.0);
    }

    #[test]
    fn standard_protocol_reveals_immediately() {
        let s = column_series(&(0..40).map(|v| v as f64).collect::<Vec<_>>());
        let mut p = ProtocolState::new(ProtocolKind::Standard, 4).unwrap();
        for r in 0..8 {
            let pair = window_at(&s, r, 3, 4).unwrap();
            let revealed = p.advance(r, pair).unwrap();
            assert_eq!(revealed.len(), 1);
            assert_eq!(revealed[0].0, r);
        }
    }

    #[test]
    fn delayed_protocol_72_rounds_h24_gives_3_events() {
        let s = column_series(&(0..200).map(|v| v as f64).collect::<Vec<_>>());
        let mut p = ProtocolState::new(ProtocolKind::DelayedFeedback, 24).unwrap();
        let mut events = Vec::new();
        for r in 0..72 {
            let pair = window_at(&s, r, 3, 24).unwrap();
            let revealed = p.advance(r, pair).unwrap();
            if !revealed.is_empty() {
                events.push((r, revealed.iter().map(|(i, _)| *i).collect::<Vec<_>>()));
            }
        }
        assert_eq!(events.len(), 3);
        assert_eq!(events[0].0, 23);
        assert_eq!(events[0].1, vec![0]);
        assert_eq!(events[1].0, 47);
        assert_eq!(events[1].1, (1..=24).collect::<Vec<_>>());
        assert_eq!(events[2].0, 71);
        assert_eq!(events[2].1, (25..=48).collect::<Vec<_>>());
    }

    #[test]
    fn delayed_protocol_h1_equals_standard() {
        let s = column_series(&(0..30).map(|v| v as f64).collect::<Vec<_>>());
        let mut std_p = ProtocolState::new(ProtocolKind::Standard, 1).unwrap();
        let mut del_p = ProtocolState::new(ProtocolKind::DelayedFeedback, 1).unwrap();
        for r in 0..20 {
            let pair = window_at(&s, r, 3, 1).unwrap();
            let a = std_p.advance(r, pair.clone()).unwrap();
            let b = del_p.advance(r, pair).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn protocol_rejects_skipped_rounds() {
        let s = column_series(&(0..30).map(|v| v as f64).collect::<Vec<_>>());
        let mut p = ProtocolState::new(ProtocolKind::Standard, 1).unwrap();
        let pair = window_at(&s, 0, 3, 1).unwrap();
        p.advance(0, pair.clone()).unwrap();
        assert!(p.advance(2, pair).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn split_parts_concatenate_to_original(
            t in 20usize..80,
            frac in 0.3f64..0.7,
            seed in 0u64..500,
        ) {
            let spec = SyntheticSpec {
                channels: 2,
                seed,
                regimes: vec![RegimeSpec {
                    length: t,
                    ar_coefficients: vec![vec![0.2], vec![0.0]],
                    noise_scale: 1.0,
                    level_offset: 0.0,
                }],
            };
            let s = generate_synthetic(&spec).unwrap();
            if let Ok((warm, online)) = split_warmup(&s, frac, 2, 1) {
                prop_assert_eq!(warm.n_steps() + online.n_steps(), s.n_steps());
                for r in 0..warm.n_steps() {
                    for c in 0..2 {
                        prop_assert_eq!(warm.values()[(r, c)], s.values()[(r, c)]);
                    }
                }
                for r in 0..online.n_steps() {
                    for c in 0..2 {
                        prop_assert_eq!(
                            online.values()[(r, c)],
                            s.values()[(warm.n_steps() + r, c)]
                        );
                    }
                }
            }
        }

        #[test]
        fn normalize_then_invert_is_identity(seed in 0u64..500) {
            let spec = SyntheticSpec {
                channels: 3,
                seed,
                regimes: vec![RegimeSpec {
                    length: 50,
                    ar_coefficients: vec![vec![0.3], vec![0.0], vec![-0.4]],
                    noise_scale: 2.0,
                    level_offset: 5.0,
                }],
            };
            let s = generate_synthetic(&spec).unwrap();
            let norm = fit_normalizer(&s).unwrap();
            let back = norm.invert(&norm.apply(&s).unwrap()).unwrap();
            for (a, b) in s.values().iter().zip(back.values().iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn consecutive_lookbacks_differ_by_one_column(
            t0 in 0usize..20,
            seed in 0u64..200,
        ) {
            let spec = SyntheticSpec {
                channels: 1,
                seed,
                regimes: vec![RegimeSpec {
                    length: 60,
                    ar_coefficients: vec![vec![0.5]],
                    noise_scale: 1.0,
                    level_offset: 0.0,
                }],
            };
            let s = generate_synthetic(&spec).unwrap();
            let a = window_at(&s, t0, 8, 2).unwrap();
            let b = window_at(&s, t0 + 1, 8, 2).unwrap();
            // Shifting by one round drops the oldest column and appends one.
            for l in 0..7 {
                prop_assert_eq!(a.lookback[(0, l + 1)], b.lookback[(0, l)]);
            }
        }
    }
}
