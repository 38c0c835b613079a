//! Benchmark arithmetic: stage latency aggregates, Poisson arrival
//! schedules, throughput verdicts and the elastic-demand model.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::efficiency_gain;
use crate::workflow::Case;

/// Manual handling time per case.
pub const MANUAL_BASELINE_SECONDS: f64 = 480.0;

/// Completed below this share of the offered rate counts as saturated.
pub const SATURATION_SHARE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: alloc::string::String },
}

fn invalid(name: &'static str, reason: impl Into<alloc::string::String>) -> BenchError {
    BenchError::InvalidParameter { name, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub preprocess: f64,
    pub propose: f64,
    pub classify: f64,
    pub report: f64,
    pub notify: f64,
    /// Submission to settling, queueing included.
    pub total: f64,
}

impl StageLatencies {
    /// preprocess, propose, classify, report, notify, total
    pub fn fields(&self) -> [f64; 6] {
        [self.preprocess, self.propose, self.classify, self.report, self.notify, self.total]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Self { preprocess: f[0], propose: f[1], classify: f[2], report: f[3], notify: f[4], total: f[5] }
    }

    pub fn stage_sum(&self) -> f64 {
        self.fields()[..5].iter().sum()
    }

    /// Stage timings recorded on a case; stages it never reached count 0.
    /// `total_ms` is measured by the caller from event timestamps.
    pub fn of_case(case: &Case, total_ms: f64) -> Self {
        let t = |s: &str| case.stage_timings.get(s).copied().unwrap_or(0.0);
        Self {
            preprocess: t("preprocess"),
            propose: t("propose"),
            classify: t("classify"),
            report: t("report"),
            notify: t("notify"),
            total: total_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub cases: usize,
    /// Set when there was nothing to aggregate; the other fields are 0.
    pub empty: bool,
    pub mean: StageLatencies,
    pub p95: StageLatencies,
}

/// Nearest-rank percentile of unsorted values; `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = libm::ceil(q * v.len() as f64) as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

pub fn summarize(samples: &[StageLatencies]) -> LatencySummary {
    if samples.is_empty() {
        return LatencySummary {
            cases: 0,
            empty: true,
            mean: StageLatencies::default(),
            p95: StageLatencies::default(),
        };
    }
    let n = samples.len() as f64;
    let mut mean = [0.0; 6];
    let mut p95 = [0.0; 6];
    for (i, (m, p)) in mean.iter_mut().zip(p95.iter_mut()).enumerate() {
        let col: Vec<f64> = samples.iter().map(|s| s.fields()[i]).collect();
        *m = col.iter().sum::<f64>() / n;
        *p = percentile(&col, 0.95).unwrap_or(0.0);
    }
    LatencySummary {
        cases: samples.len(),
        empty: false,
        mean: StageLatencies::from_fields(mean),
        p95: StageLatencies::from_fields(p95),
    }
}

/// Open-loop Poisson arrival offsets in seconds within `[0, duration_s)`.
pub fn poisson_arrivals(rate_per_hour: f64, duration_s: f64, seed: u64) -> Result<Vec<f64>, BenchError> {
    if !(rate_per_hour > 0.0 && rate_per_hour.is_finite()) {
        return Err(invalid("offered_rate", alloc::format!("{rate_per_hour} is not a positive rate")));
    }
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(invalid("duration", alloc::format!("{duration_s} is not a duration")));
    }
    let gaps = Exp::new(rate_per_hour / 3600.0).map_err(|_| invalid("offered_rate", "rejected by the sampler"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = gaps.sample(&mut rng);
    while t < duration_s {
        out.push(t);
        t += gaps.sample(&mut rng);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub offered_rate: f64,
    pub completed_rate: f64,
    pub arrivals: usize,
    pub completed: usize,
    pub mean_total_ms: f64,
    pub p95_total_ms: f64,
    pub saturated: bool,
    /// Against [`MANUAL_BASELINE_SECONDS`]; absent when nothing completed
    /// or the mean exceeds the baseline.
    pub efficiency_gain: Option<f64>,
}

impl BenchResult {
    /// `completed_rate` scales the offered rate by the share of arrivals
    /// that completed, so it never exceeds the offered rate even when the
    /// sampled arrivals outnumber the expectation. A run without arrivals
    /// served everything it was offered.
    pub fn new(offered_rate: f64, arrivals: usize, completed: usize, totals_ms: &[f64]) -> Self {
        let completed = completed.min(arrivals);
        let share = if arrivals == 0 { 1.0 } else { completed as f64 / arrivals as f64 };
        let completed_rate = offered_rate * share;
        let mean_total_ms =
            if totals_ms.is_empty() { 0.0 } else { totals_ms.iter().sum::<f64>() / totals_ms.len() as f64 };
        BenchResult {
            offered_rate,
            completed_rate,
            arrivals,
            completed,
            mean_total_ms,
            p95_total_ms: percentile(totals_ms, 0.95).unwrap_or(0.0),
            saturated: completed_rate < SATURATION_SHARE * offered_rate,
            efficiency_gain: if totals_ms.is_empty() {
                None
            } else {
                efficiency_gain(MANUAL_BASELINE_SECONDS, mean_total_ms / 1000.0).ok()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadModelConfig {
    /// Cases per hour offered in round 0.
    pub base_rate: f64,
    pub elasticity: f64,
    pub manual_baseline_seconds: f64,
    pub rounds: usize,
}

impl Default for LoadModelConfig {
    fn default() -> Self {
        Self { base_rate: 500.0, elasticity: 0.5, manual_baseline_seconds: MANUAL_BASELINE_SECONDS, rounds: 5 }
    }
}

impl LoadModelConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return Err(invalid("base_rate", "must be positive"));
        }
        if !(self.elasticity >= 0.0 && self.elasticity.is_finite()) {
            return Err(invalid("elasticity", "must be non-negative"));
        }
        if !(self.manual_baseline_seconds > 0.0) {
            return Err(invalid("manual_baseline_seconds", "must be positive"));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "at least one round"));
        }
        Ok(())
    }
}

/// Per-round multiplier `1 + e·(baseline − latency)/baseline`, before the
/// never-shrink clamp.
pub fn growth_factor(elasticity: f64, latency_s: f64, baseline_s: f64) -> f64 {
    1.0 + elasticity * (baseline_s - latency_s) / baseline_s
}

/// Next round's offered rate; never below the current one.
pub fn next_rate(rate: f64, elasticity: f64, latency_s: f64, baseline_s: f64) -> f64 {
    (rate * growth_factor(elasticity, latency_s, baseline_s)).max(rate)
}

/// What one round at a given offered rate produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMeasurement {
    pub mean_latency_s: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JevonsRound {
    pub round: usize,
    pub offered_rate: f64,
    pub mean_latency_s: f64,
    pub saturated: bool,
}

/// Runs rounds until `config.rounds` or the first saturated round, feeding
/// each measured latency into the demand update.
pub fn jevons_rounds<E>(
    config: &LoadModelConfig,
    mut measure: impl FnMut(usize, f64) -> Result<RoundMeasurement, E>,
) -> Result<Vec<JevonsRound>, E>
where
    E: From<BenchError>,
{
    config.validate()?;
    let mut rate = config.base_rate;
    let mut out = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let m = measure(round, rate)?;
        out.push(JevonsRound { round, offered_rate: rate, mean_latency_s: m.mean_latency_s, saturated: m.saturated });
        if m.saturated {
            break;
        }
        rate = next_rate(rate, config.elasticity, m.mean_latency_s, config.manual_baseline_seconds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixed(latency: f64) -> impl FnMut(usize, f64) -> Result<RoundMeasurement, BenchError> {
        move |_, _| Ok(RoundMeasurement { mean_latency_s: latency, saturated: false })
    }

    #[test]
    fn growth_factor_hand_value() {
        // 1 + 0.5 · 473/480
        let g = growth_factor(0.5, 7.0, 480.0);
        assert!((g - 1.4927).abs() < 1e-4, "{g}");
        assert!((g - (1.0 + 0.5 * 473.0 / 480.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_elasticity_is_constant() {
        let cfg = LoadModelConfig { elasticity: 0.0, rounds: 6, ..Default::default() };
        let t = jevons_rounds(&cfg, fixed(7.0)).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.iter().all(|r| r.offered_rate == 500.0));
    }

    #[test]
    fn baseline_latency_leaves_rate_unchanged() {
        assert_eq!(next_rate(500.0, 0.5, 480.0, 480.0), 500.0);
        // slower than manual would shrink demand; the clamp holds it
        assert_eq!(next_rate(500.0, 0.5, 900.0, 480.0), 500.0);
    }

    #[test]
    fn stops_at_first_saturated_round() {
        let cfg = LoadModelConfig { rounds: 10, ..Default::default() };
        let t = jevons_rounds(&cfg, |round, _| {
            Ok::<_, BenchError>(RoundMeasurement { mean_latency_s: 7.0, saturated: round == 2 })
        })
        .unwrap();
        assert_eq!(t.len(), 3);
        assert!(t[2].saturated);
        assert!((t[1].offered_rate / t[0].offered_rate - 1.4927).abs() < 1e-4);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            LoadModelConfig { base_rate: 0.0, ..Default::default() },
            LoadModelConfig { elasticity: -1.0, ..Default::default() },
            LoadModelConfig { rounds: 0, ..Default::default() },
        ] {
            assert!(jevons_rounds(&cfg, fixed(7.0)).is_err());
        }
    }

    proptest! {
        #[test]
        fn trajectory_never_decreases(e in 0.0f64..3.0, lat in proptest::collection::vec(0.0f64..480.0, 1..12)) {
            let cfg = LoadModelConfig { elasticity: e, rounds: lat.len(), ..Default::default() };
            let t = jevons_rounds(&cfg, |r, _| Ok::<_, BenchError>(RoundMeasurement { mean_latency_s: lat[r], saturated: false })).unwrap();
            for w in t.windows(2) {
                prop_assert!(w[1].offered_rate >= w[0].offered_rate);
            }
        }

        #[test]
        fn completed_never_exceeds_offered(rate in 0.1f64..1e5, arrivals in 0usize..500, done in 0usize..600) {
            let r = BenchResult::new(rate, arrivals, done, &[]);
            prop_assert!(r.completed_rate <= r.offered_rate);
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), Some(19.0));
        assert_eq!(percentile(&v, 1.0), Some(20.0));
        assert_eq!(percentile(&[3.0], 0.95), Some(3.0));
        assert_eq!(percentile(&[], 0.95), None);
    }

    #[test]
    fn summary_of_nothing_is_marked_empty() {
        let s = summarize(&[]);
        assert!(s.empty);
        assert_eq!(s.cases, 0);
        let one = StageLatencies { preprocess: 1.0, propose: 2.0, classify: 3.0, report: 4.0, notify: 5.0, total: 20.0 };
        let s = summarize(&[one, one]);
        assert_eq!(s.mean, one);
        assert_eq!(s.p95, one);
        assert!(s.mean.total >= s.mean.stage_sum());
    }

    #[test]
    fn arrivals_are_seeded_poisson() {
        let a = poisson_arrivals(500.0, 600.0, 7).unwrap();
        assert_eq!(a, poisson_arrivals(500.0, 600.0, 7).unwrap());
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.iter().all(|&t| (0.0..600.0).contains(&t)));
        // mean count over many seeds ≈ rate · duration
        let n: usize = (0..200).map(|s| poisson_arrivals(500.0, 600.0, s).unwrap().len()).sum();
        let mean = n as f64 / 200.0;
        assert!((mean - 83.33).abs() < 3.0, "{mean}");
        assert!(poisson_arrivals(0.0, 600.0, 1).is_err());
        assert!(poisson_arrivals(1.0, 600.0, 1).unwrap().len() <= 3);
    }

    #[test]
    fn saturation_verdict() {
        let r = BenchResult::new(500.0, 80, 80, &[1000.0, 3000.0]);
        assert!(!r.saturated);
        assert_eq!(r.mean_total_ms, 2000.0);
        assert!((r.efficiency_gain.unwrap() - (480.0 - 2.0) / 480.0).abs() < 1e-12);
        let r = BenchResult::new(50_000.0, 8000, 400, &[]);
        assert!(r.saturated);
        assert!((r.completed_rate - 2500.0).abs() < 1e-9);
        let r = BenchResult::new(1.0, 0, 0, &[]);
        assert!(!r.saturated && r.efficiency_gain.is_none());
    }
}
