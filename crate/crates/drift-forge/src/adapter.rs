//! Memory-backed model adaptation.
//!
//! Two FIFO banks feed adaptation: a small recent bank holding the newest
//! pairs and a larger history bank holding what the recent bank evicted.
//! When the detector triggers, the history bank is expanded into an
//! augmented set by jittering look-back features with zero-mean Gaussian
//! noise whose per-coordinate variance matches the observed feature
//! variance, and the model is retrained on batches from the recent bank
//! plus a weighted term over the augmented set. Retraining either updates
//! every parameter at a fixed learning rate or only the regressor block
//! under a halve-on-plateau style schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::forecaster::{loss_and_grad, mse_loss, predict, AdamState, ForecasterSpec, ParamVector};
use crate::stream::WindowPair;
use crate::{Error, Result};

/// Fixed-capacity FIFO of training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    items: std::collections::VecDeque<WindowPair>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be >= 1".into()));
        }
        Ok(Self { capacity, items: std::collections::VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WindowPair> {
        self.items.iter()
    }

    /// Appends a pair, returning the oldest one when the bank was full.
    pub fn push(&mut self, pair: WindowPair) -> Option<WindowPair> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(pair);
        evicted
    }
}

/// Per-coordinate sample variance of the flattened look-back features over
/// the union of the given banks. A union holding a single pair has zero
/// variance everywhere.
pub fn feature_variance(banks: &[&MemoryBank]) -> Result<Vec<f64>> {
    let mut dims = None;
    let mut n = 0usize;
    for bank in banks {
        for pair in bank.iter() {
            let d = pair.lookback.len();
            match dims {
                None => dims = Some(d),
                Some(existing) if existing != d => {
                    return Err(Error::Bounds(
                        "look-back shapes differ across memory banks".into(),
                    ))
                }
                _ => {}
            }
            n += 1;
        }
    }
    let dims = dims.ok_or_else(|| Error::Bounds("no pairs to compute variance over".into()))?;
    let mut mean = vec![0.0; dims];
    for bank in banks {
        for pair in bank.iter() {
            for (m, x) in mean.iter_mut().zip(pair.lookback.as_slice()) {
                *m += x;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    if n == 1 {
        return Ok(vec![0.0; dims]);
    }
    let mut var = vec![0.0; dims];
    for bank in banks {
        for pair in bank.iter() {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(pair.lookback.as_slice()) {
                let d = x - m;
                *v += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= (n - 1) as f64;
    }
    Ok(var)
}

/// Builds the augmented set: every pair in `source` gets an independent
/// Gaussian jitter on each flattened look-back coordinate with standard
/// deviation `sqrt(scales[j])`, while targets and step indices are copied
/// unchanged. One normal draw is consumed per coordinate regardless of the
/// scale, so the draw sequence does not depend on which coordinates are
/// degenerate.
pub fn synthesize_augmented(
    source: &MemoryBank,
    scales: &[f64],
    seed: u64,
) -> Result<Vec<WindowPair>> {
    if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Numeric("variance scales must be finite and non-negative".into()));
    }
    let stds: Vec<f64> = scales.iter().map(|s| s.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(source.len());
    for pair in source.iter() {
        if pair.lookback.len() != scales.len() {
            return Err(Error::Bounds(format!(
                "variance vector has {} entries but the look-back has {}",
                scales.len(),
                pair.lookback.len()
            )));
        }
        let mut jittered = pair.lookback.clone();
        for (x, std) in jittered.iter_mut().zip(&stds) {
            let z: f64 = rng.sample(StandardNormal);
            *x += z * std;
        }
        out.push(WindowPair {
            lookback: jittered,
            target: pair.target.clone(),
            step_index: pair.step_index,
        });
    }
    Ok(out)
}

/// Weight of the augmented-replay loss term, chosen by channel count:
/// high-dimensional streams replay harder.
pub fn select_lambda(channels: usize) -> f64 {
    if channels >= 20 {
        2.0
    } else {
        0.1
    }
}

/// Which parameters retraining touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// All parameters, constant learning rate.
    Full,
    /// Regressor block only; the learning rate divides by `plateau_factor`
    /// whenever an epoch fails to improve and training stops below `lr_min`.
    RegressorOnly,
}

/// Retraining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Replay weight; `None` selects by channel count.
    pub lambda: Option<f64>,
    /// Batches per epoch; `None` covers the recent bank once.
    pub steps_per_epoch: Option<usize>,
    pub plateau_factor: f64,
    pub lr_min: f64,
    /// Seeds batch shuffling; recent and augmented batches use independent
    /// substreams of this seed.
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 20,
            batch_size: 8,
            lambda: None,
            steps_per_epoch: None,
            plateau_factor: 3.0,
            lr_min: 1e-5,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.plateau_factor.is_finite() || self.plateau_factor <= 1.0 {
            return Err(Error::Config("plateau_factor must be finite and exceed 1".into()));
        }
        if !self.lr_min.is_finite() || self.lr_min < 0.0 {
            return Err(Error::Config("lr_min must be finite and non-negative".into()));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::Config("lambda must be finite and non-negative".into()));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Why an adaptation ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerKind {
    DriftAlarm,
    ScheduledRefresh,
}

/// Everything one retraining event produced, for reports and benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub event_round: usize,
    pub trigger: TriggerKind,
    pub mode: AdaptMode,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub lr_path: Vec<f64>,
    /// Mean forecast MSE over the recent bank before retraining.
    pub pre_loss: f64,
    /// Same quantity afterwards.
    pub post_loss: f64,
    /// Total parameter entries written by the optimizer.
    pub grad_entries: u64,
    pub wall_time_secs: f64,
    /// True when the plateau schedule stopped training before `max_epochs`.
    pub aborted: bool,
}

/// Mean forecast MSE over a set of pairs.
pub fn evaluate_mean_mse(
    params: &ParamVector,
    spec: &ForecasterSpec,
    pairs: &[&WindowPair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Bounds("cannot evaluate on an empty set".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        let pred = predict(params, spec, &pair.lookback)?;
        total += mse_loss(&pred, &pair.target);
    }
    Ok(total / pairs.len() as f64)
}

/// Retrains every parameter on the recent bank plus the weighted augmented
/// set. On a non-finite loss or gradient the starting parameters are
/// restored bit for bit and an error is returned.
pub fn adapt_full(
    params: &mut ParamVector,
    spec: &ForecasterSpec,
    recent: &MemoryBank,
    augmented: &[WindowPair],
    cfg: &AdaptConfig,
    event_round: usize,
    trigger: TriggerKind,
) -> Result<AdaptationTrace> {
    run_adaptation(params, spec, recent, augmented, cfg, event_round, trigger, AdaptMode::Full)
}

/// Like [`adapt_full`] but freezes the encoder block (a no-op distinction
/// for the linear model) and anneals the learning rate on plateaus.
pub fn adapt_regressor_only(
    params: &mut ParamVector,
    spec: &ForecasterSpec,
    recent: &MemoryBank,
    augmented: &[WindowPair],
    cfg: &AdaptConfig,
    event_round: usize,
    trigger: TriggerKind,
) -> Result<AdaptationTrace> {
    run_adaptation(
        params,
        spec,
        recent,
        augmented,
        cfg,
        event_round,
        trigger,
        AdaptMode::RegressorOnly,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_adaptation(
    params: &mut ParamVector,
    spec: &ForecasterSpec,
    recent: &MemoryBank,
    augmented: &[WindowPair],
    cfg: &AdaptConfig,
    event_round: usize,
    trigger: TriggerKind,
    mode: AdaptMode,
) -> Result<AdaptationTrace> {
    cfg.validate()?;
    if recent.is_empty() {
        return Err(Error::Bounds("cannot adapt from an empty memory bank".into()));
    }
    let start = Instant::now();
    let snapshot = params.clone();
    let m_pairs: Vec<&WindowPair> = recent.iter().collect();
    let pre_loss = evaluate_mean_mse(params, spec, &m_pairs)?;

    let lambda = cfg.lambda.unwrap_or_else(|| select_lambda(spec.channels));
    let use_aug = lambda > 0.0 && !augmented.is_empty();
    let freeze = mode == AdaptMode::RegressorOnly;
    let skip = if freeze { spec.encoder_len() } else { 0 };
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| m_pairs.len().div_ceil(cfg.batch_size).max(1));

    let mut rng_m = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_m.set_stream(0);
    let mut rng_d = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_d.set_stream(1);

    let mut m_order: Vec<usize> = (0..m_pairs.len()).collect();
    let mut d_order: Vec<usize> = (0..augmented.len()).collect();

    let mut adam = AdamState::new(spec.n_params(), cfg.lr);
    let mut grad = vec![0.0; spec.n_params()];
    let mut epoch_losses = Vec::new();
    let mut lr_path = Vec::new();
    let mut grad_entries = 0u64;
    let mut lr = cfg.lr;
    let mut aborted = false;

    'epochs: for _ in 0..cfg.max_epochs {
        m_order.shuffle(&mut rng_m);
        if use_aug {
            d_order.shuffle(&mut rng_d);
        }
        let m_chunks: Vec<&[usize]> = m_order.chunks(cfg.batch_size).collect();
        let d_chunks: Vec<&[usize]> = if use_aug {
            d_order.chunks(cfg.batch_size).collect()
        } else {
            Vec::new()
        };

        lr_path.push(lr);
        adam.lr = lr;
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let m_batch: Vec<(&nalgebra::DMatrix<f64>, &nalgebra::DMatrix<f64>)> = m_chunks
                [step % m_chunks.len()]
            .iter()
            .map(|&i| (&m_pairs[i].lookback, &m_pairs[i].target))
            .collect();
            let mut step_loss = loss_and_grad(params, spec, &m_batch, freeze, 1.0, &mut grad)?;
            if use_aug {
                let d_batch: Vec<(&nalgebra::DMatrix<f64>, &nalgebra::DMatrix<f64>)> = d_chunks
                    [step % d_chunks.len()]
                .iter()
                .map(|&i| (&augmented[i].lookback, &augmented[i].target))
                .collect();
                let d_loss = loss_and_grad(params, spec, &d_batch, freeze, lambda, &mut grad)?;
                step_loss += lambda * d_loss;
            }
            if !step_loss.is_finite() || grad[skip..].iter().any(|g| !g.is_finite()) {
                *params = snapshot;
                return Err(Error::Numeric(format!(
                    "non-finite retraining loss at round {event_round}; parameters restored"
                )));
            }
            grad_entries += adam.apply(params, &grad, skip) as u64;
            epoch_loss += step_loss;
        }
        epoch_loss /= steps_per_epoch as f64;

        if freeze {
            if let Some(&prev) = epoch_losses.last() {
                if epoch_loss >= prev {
                    lr /= cfg.plateau_factor;
                    if lr < cfg.lr_min {
                        epoch_losses.push(epoch_loss);
                        aborted = true;
                        break 'epochs;
                    }
                }
            }
        }
        epoch_losses.push(epoch_loss);
    }

    let post_loss = evaluate_mean_mse(params, spec, &m_pairs)?;
    Ok(AdaptationTrace {
        event_round,
        trigger,
        mode,
        epochs: epoch_losses.len(),
        epoch_losses,
        lr_path,
        pre_loss,
        post_loss,
        grad_entries,
        wall_time_secs: start.elapsed().as_secs_f64(),
        aborted,
    })
}
