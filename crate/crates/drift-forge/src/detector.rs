//! Loss-based drift detection.
//!
//! The detector keeps a buffer of pre-update forecasting losses and runs a
//! one-sided mean-shift test on every check: with `mu` and `sigma` the mean
//! and sample standard deviation of the whole buffer and `mu_tilde` the mean
//! of the newest `window_len` entries, the statistic
//! `z = (mu_tilde - mu) / (sigma / sqrt(n))` is compared against a normal
//! quantile. Only upward shifts (recent losses worse than history) raise an
//! alarm. Independently, a scheduled refresh fires once `refresh_interval`
//! losses accumulate without an alarm, so slow degradation that never trips
//! the test still triggers adaptation eventually.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Standard deviations this small are treated as zero; the test is skipped
/// to avoid dividing by noise-free buffers.
pub const EPS_SIGMA: f64 = 1e-12;

/// Two-sided normal quantile used as the alarm threshold: the inverse
/// standard-normal CDF evaluated at `1 - significance / 2`.
pub fn threshold_from_significance(significance: f64) -> Result<f64> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::Config(format!(
            "significance must lie in (0, 1), got {significance}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal is well formed");
    Ok(normal.inverse_cdf(1.0 - significance / 2.0))
}

/// Detector hyperparameters. `threshold` is derived from `significance`
/// at construction and stored so serialized configs are self-contained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Number of newest losses that form the recent-mean window.
    pub window_len: usize,
    /// Two-sided significance level of the mean-shift test.
    pub significance: f64,
    /// Losses between forced refreshes when no alarm fires.
    pub refresh_interval: usize,
    /// Alarm threshold on the z statistic.
    pub threshold: f64,
}

impl DetectorConfig {
    pub fn new(window_len: usize, significance: f64, refresh_interval: usize) -> Result<Self> {
        let threshold = threshold_from_significance(significance)?;
        let config = Self { window_len, significance, refresh_interval, threshold };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::Config("window_len must be >= 2".into()));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Config("significance must lie in (0, 1)".into()));
        }
        if self.refresh_interval < self.window_len {
            return Err(Error::Config(
                "refresh_interval must be >= window_len".into(),
            ));
        }
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(Error::Config("threshold must be finite and positive".into()));
        }
        Ok(())
    }
}

/// What a check concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictKind {
    NoDrift,
    DriftAlarm,
    ScheduledRefresh,
}

/// Check outcome plus the test statistics when the buffer was long enough
/// to compute them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_tilde: Option<f64>,
}

impl Verdict {
    fn silent(kind: VerdictKind) -> Self {
        Self { kind, z_score: None, mu: None, sigma: None, mu_tilde: None }
    }
}

/// One verdict tagged with the round it was produced in, for JSONL logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub round: usize,
    pub kind: VerdictKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_tilde: Option<f64>,
}

impl VerdictRecord {
    pub fn new(round: usize, verdict: &Verdict) -> Self {
        Self {
            round,
            kind: verdict.kind,
            z_score: verdict.z_score,
            mu: verdict.mu,
            sigma: verdict.sigma,
            mu_tilde: verdict.mu_tilde,
        }
    }
}

/// Loss buffer plus bookkeeping. `check` is pure; only `record_loss` and
/// `reset` mutate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    config: DetectorConfig,
    losses: Vec<f64>,
    steps_since_reset: usize,
}

impl DetectorState {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, losses: Vec::new(), steps_since_reset: 0 })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn buffer_len(&self) -> usize {
        self.losses.len()
    }

    pub fn steps_since_reset(&self) -> usize {
        self.steps_since_reset
    }

    /// Appends one pre-update loss to the buffer.
    pub fn record_loss(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::Numeric(format!(
                "losses must be finite and non-negative, got {loss}"
            )));
        }
        self.losses.push(loss);
        self.steps_since_reset += 1;
        Ok(())
    }

    /// Runs the mean-shift test on the current buffer. The alarm requires
    /// strictly more than `window_len` losses (so the recent window is
    /// compared against at least one older point) and a non-degenerate
    /// standard deviation; otherwise only the scheduled refresh can fire.
    #[must_use]
    pub fn check(&self) -> Verdict {
        let n = self.losses.len();
        let w = self.config.window_len;
        let alarm = if n > w {
            let mu = self.losses.iter().sum::<f64>() / n as f64;
            let var = self
                .losses
                .iter()
                .map(|l| (l - mu) * (l - mu))
                .sum::<f64>()
                / (n - 1) as f64;
            let sigma = var.sqrt();
            let mu_tilde = self.losses[n - w..].iter().sum::<f64>() / w as f64;
            if sigma > EPS_SIGMA {
                let z = (mu_tilde - mu) / (sigma / (n as f64).sqrt());
                Some(Verdict {
                    kind: if z > self.config.threshold {
                        VerdictKind::DriftAlarm
                    } else {
                        VerdictKind::NoDrift
                    },
                    z_score: Some(z),
                    mu: Some(mu),
                    sigma: Some(sigma),
                    mu_tilde: Some(mu_tilde),
                })
            } else {
                Some(Verdict {
                    kind: VerdictKind::NoDrift,
                    z_score: None,
                    mu: Some(mu),
                    sigma: Some(sigma),
                    mu_tilde: Some(mu_tilde),
                })
            }
        } else {
            None
        };
        match alarm {
            Some(v) if v.kind == VerdictKind::DriftAlarm => v,
            other => {
                if self.steps_since_reset >= self.config.refresh_interval {
                    let mut v = other.unwrap_or_else(|| Verdict::silent(VerdictKind::ScheduledRefresh));
                    v.kind = VerdictKind::ScheduledRefresh;
                    v
                } else {
                    other.unwrap_or_else(|| Verdict::silent(VerdictKind::NoDrift))
                }
            }
        }
    }

    /// Clears the buffer and the refresh counter; the configuration stays.
    pub fn reset(&mut self) {
        self.losses.clear();
        self.steps_since_reset = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(window_len: usize, significance: f64, refresh_interval: usize) -> DetectorConfig {
        DetectorConfig::new(window_len, significance, refresh_interval).unwrap()
    }

    #[test]
    fn thresholds_match_known_normal_quantiles() {
        assert!((threshold_from_significance(0.05).unwrap() - 1.959963984540054).abs() < 1e-12);
        assert!(
            (threshold_from_significance(0.01).unwrap() - 2.5758293035489004).abs() < 1e-12
        );
    }

    #[test]
    fn out_of_range_significance_is_rejected() {
        assert!(threshold_from_significance(0.0).is_err());
        assert!(threshold_from_significance(1.0).is_err());
        assert!(threshold_from_significance(-0.5).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DetectorConfig::new(1, 0.01, 64).is_err());
        assert!(DetectorConfig::new(4, 0.01, 3).is_err());
        assert!(DetectorConfig::new(4, 0.01, 4).is_ok());
    }

    #[test]
    fn step_shift_produces_the_expected_statistic() {
        // Buffer [1,1,1,1,3,3,3,3] with a window of 4: mu = 2, mu_tilde = 3,
        // sigma = sqrt(8/7), so z = 1 / (sigma / sqrt(8)) = sqrt(7).
        let mut det = DetectorState::new(config(4, 0.01, 1000)).unwrap();
        for l in [1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0] {
            det.record_loss(l).unwrap();
        }
        let v = det.check();
        let z = v.z_score.unwrap();
        assert!((z - 7f64.sqrt()).abs() < 1e-12, "z = {z}");
        assert!((z - 2.6457513110645907).abs() < 1e-12);
        assert_eq!(v.kind, VerdictKind::DriftAlarm);
        assert_eq!(v.mu, Some(2.0));
        assert_eq!(v.mu_tilde, Some(3.0));
    }

    #[test]
    fn downward_shift_never_alarms() {
        let mut det = DetectorState::new(config(4, 0.2, 1000)).unwrap();
        for l in [3.0, 3.0, 3.0, 3.0, 1.0, 1.0, 1.0, 1.0] {
            det.record_loss(l).unwrap();
        }
        let v = det.check();
        assert_eq!(v.kind, VerdictKind::NoDrift);
        assert!((v.z_score.unwrap() + 7f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_buffer_is_degenerate_and_silent() {
        let mut det = DetectorState::new(config(4, 0.01, 1000)).unwrap();
        for _ in 0..20 {
            det.record_loss(5.0).unwrap();
        }
        let v = det.check();
        assert_eq!(v.kind, VerdictKind::NoDrift);
        assert_eq!(v.z_score, None);
        assert_eq!(v.sigma, Some(0.0));
    }

    #[test]
    fn short_buffers_stay_silent_even_under_huge_shifts() {
        let mut det = DetectorState::new(config(4, 0.01, 1000)).unwrap();
        for l in [0.0, 0.0, 1e6, 1e6] {
            det.record_loss(l).unwrap();
            let v = det.check();
            assert_eq!(v.kind, VerdictKind::NoDrift);
            assert_eq!(v.z_score, None);
        }
        // One more loss makes the buffer long enough for the statistic.
        det.record_loss(1e6).unwrap();
        assert!(det.check().z_score.is_some());
    }

    #[test]
    fn refresh_fires_on_schedule_without_an_alarm() {
        let mut det = DetectorState::new(config(2, 0.01, 6)).unwrap();
        for i in 0..5 {
            det.record_loss(1.0 + 1e-6 * i as f64).unwrap();
            assert_eq!(det.check().kind, VerdictKind::NoDrift, "step {i}");
        }
        det.record_loss(1.0).unwrap();
        assert_eq!(det.check().kind, VerdictKind::ScheduledRefresh);
        // check is pure: asking again gives the same verdict.
        assert_eq!(det.check().kind, VerdictKind::ScheduledRefresh);
    }

    #[test]
    fn alarm_takes_priority_over_refresh() {
        let mut det = DetectorState::new(config(4, 0.01, 8)).unwrap();
        for l in [1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0] {
            det.record_loss(l).unwrap();
        }
        assert_eq!(det.steps_since_reset(), 8);
        assert_eq!(det.check().kind, VerdictKind::DriftAlarm);
    }

    #[test]
    fn reset_clears_state_and_keeps_config() {
        let cfg = config(4, 0.01, 8);
        let mut det = DetectorState::new(cfg).unwrap();
        for l in [1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0] {
            det.record_loss(l).unwrap();
        }
        assert_eq!(det.check().kind, VerdictKind::DriftAlarm);
        det.reset();
        assert_eq!(det.buffer_len(), 0);
        assert_eq!(det.steps_since_reset(), 0);
        assert_eq!(det.check().kind, VerdictKind::NoDrift);
        assert_eq!(det.config(), &cfg);
        det.reset();
        assert_eq!(det.buffer_len(), 0);
    }

    #[test]
    fn bad_losses_are_rejected() {
        let mut det = DetectorState::new(config(4, 0.01, 8)).unwrap();
        assert!(det.record_loss(f64::NAN).is_err());
        assert!(det.record_loss(f64::INFINITY).is_err());
        assert!(det.record_loss(-0.5).is_err());
        assert_eq!(det.buffer_len(), 0);
    }

    #[test]
    fn verdict_record_serializes_compactly() {
        let v = Verdict::silent(VerdictKind::NoDrift);
        let rec = VerdictRecord::new(17, &v);
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(json, r#"{"round":17,"kind":"no-drift"}"#);
        let back: VerdictRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn statistic_matches_direct_formula(
            losses in proptest::collection::vec(0.0f64..10.0, 5..60),
            window in 2usize..4,
        ) {
            let mut det = DetectorState::new(config(window, 0.01, 10_000)).unwrap();
            for &l in &losses {
                det.record_loss(l).unwrap();
            }
            let v = det.check();
            let n = losses.len();
            prop_assume!(n > window);
            let mu = losses.iter().sum::<f64>() / n as f64;
            let var = losses.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sigma = var.sqrt();
            prop_assume!(sigma > EPS_SIGMA);
            let mu_tilde = losses[n - window..].iter().sum::<f64>() / window as f64;
            let z = (mu_tilde - mu) / (sigma / (n as f64).sqrt());
            prop_assert!((v.z_score.unwrap() - z).abs() <= 1e-9 * z.abs().max(1.0));
            prop_assert_eq!(
                v.kind == VerdictKind::DriftAlarm,
                z > det.config().threshold
            );
        }
    }
}
