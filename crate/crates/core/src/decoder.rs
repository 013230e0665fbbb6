//! Trajectory forecasts and the stand-in generators that produce them.
//!
//! [`generate_from_action`] realizes an action as a price path: a pinned
//! bridge through the start, end, peak and trough knots with seeded noise
//! in between. Direction, peak timing, trough timing and the four pinned
//! summaries are guaranteed. The remaining shape fields (turning points,
//! trendline fit, tail risk, ...) are matched best-effort by searching over
//! a fixed budget of seeded candidates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action::{
    action_agreement, derive_action, scored_field_specs, validate, BinningConfig, ForecastAction, Monotonicity,
    RiskLevel, Timing,
};
use crate::error::{Error, Result};
use crate::market_data::OhlcvSeries;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryForecast {
    pub closes: Vec<f64>,
    /// Per-step predicted variance, consumed by uncertainty aggregation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_quantiles: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_quantiles: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volumes: Option<Vec<f64>>,
}

impl TrajectoryForecast {
    pub fn from_closes(closes: Vec<f64>) -> Self {
        TrajectoryForecast {
            closes,
            variances: None,
            high_quantiles: None,
            low_quantiles: None,
            volumes: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.closes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.horizon();
        if s == 0 {
            return Err(Error::Validation("forecast has no steps".into()));
        }
        if let Some(p) = self.closes.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Validation(format!("forecast prices must be positive, got {p}")));
        }
        for (name, path) in [
            ("variances", &self.variances),
            ("high_quantiles", &self.high_quantiles),
            ("low_quantiles", &self.low_quantiles),
            ("volumes", &self.volumes),
        ] {
            if let Some(p) = path {
                if p.len() != s {
                    return Err(Error::Shape(format!("{name} has {} steps, closes have {s}", p.len())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Daily noise (fraction of start price) per volatility level.
    pub level_sigma: [f64; 3],
    /// Seeded candidates tried before settling on the best match.
    pub candidates: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            level_sigma: [0.006, 0.014, 0.025],
            candidates: 256,
        }
    }
}

const AMPLITUDE_SCHEDULE: [f64; 8] = [1.0, 0.6, 0.35, 1.5, 0.2, 0.8, 0.1, 0.0];

fn allowed_extreme_steps(
    bin: Timing,
    value: f64,
    start: f64,
    end: f64,
    horizon: usize,
    config: &BinningConfig,
) -> Vec<usize> {
    // The earliest extreme wins ties, so a start that already sits at the
    // extreme pins the extreme to step 0.
    if value == start {
        return if config.timing_bin(0, horizon) == bin {
            vec![0]
        } else {
            Vec::new()
        };
    }
    (1..horizon)
        .filter(|&i| config.timing_bin(i, horizon) == bin)
        .filter(|&i| i + 1 < horizon || value == end)
        .collect()
}

fn bridge_path(
    action: &ForecastAction,
    horizon: usize,
    peak: usize,
    trough: usize,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (lo, hi) = (action.min_value, action.max_value);
    let mut knots = vec![
        (0, action.start_value),
        (peak, hi),
        (trough, lo),
        (horizon - 1, action.end_value),
    ];
    knots.sort_by_key(|k| k.0);
    knots.dedup_by_key(|k| k.0);

    let margin = (hi - lo) * 1e-6;
    let mut path = vec![0.0; horizon];
    for pair in knots.windows(2) {
        let ((i0, v0), (i1, v1)) = (pair[0], pair[1]);
        let n = i1 - i0;
        path[i0] = v0;
        path[i1] = v1;
        let mut walk = vec![0.0; n + 1];
        for k in 1..=n {
            let z: f64 = rng.sample(StandardNormal);
            walk[k] = walk[k - 1] + amplitude * z;
        }
        for k in 1..n {
            let frac = k as f64 / n as f64;
            let bridge = walk[k] - frac * walk[n];
            path[i0 + k] = (v0 + (v1 - v0) * frac + bridge).clamp(lo + margin, hi - margin);
        }
    }
    path
}

/// Monotone path from start to end with random positive step sizes.
fn monotone_path(action: &ForecastAction, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let weights: Vec<f64> = (1..horizon)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z.abs() + 0.2
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let rise = action.end_value - action.start_value;
    let mut path = Vec::with_capacity(horizon);
    path.push(action.start_value);
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        path.push(if k + 2 == horizon {
            action.end_value
        } else {
            action.start_value + rise * acc / total
        });
    }
    path
}

fn level_index(level: RiskLevel) -> usize {
    match level {
        RiskLevel::Low => 0,
        RiskLevel::Medium => 1,
        RiskLevel::High => 2,
    }
}

/// Generates a `horizon`-step close path honoring `action`.
pub fn generate_from_action(
    action: &ForecastAction,
    horizon: usize,
    seed: u64,
    noise_scale: f64,
    binning: &BinningConfig,
    config: &GeneratorConfig,
) -> Result<TrajectoryForecast> {
    if horizon < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: horizon,
        });
    }
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(Error::Domain(format!(
            "noise scale must be non-negative, got {noise_scale}"
        )));
    }
    let violations = validate(action);
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Validation(text.join("; ")));
    }

    let start = action.start_value;
    let end = action.end_value;
    if action.max_value == action.min_value {
        return Ok(TrajectoryForecast::from_closes(vec![start; horizon]));
    }
    let pinned_direction = binning.direction(100.0 * (end - start) / start);
    if pinned_direction != action.direction {
        return Err(Error::Validation(format!(
            "direction `{}` contradicts the pinned endpoints (they imply `{}`)",
            action.direction, pinned_direction
        )));
    }

    let peaks = allowed_extreme_steps(action.peak_timing_bin, action.max_value, start, end, horizon, binning);
    let troughs = allowed_extreme_steps(action.trough_timing_bin, action.min_value, start, end, horizon, binning);
    let pairs: Vec<(usize, usize)> = peaks
        .iter()
        .flat_map(|&p| troughs.iter().map(move |&q| (p, q)))
        .filter(|(p, q)| p != q)
        .collect();
    if pairs.is_empty() {
        return Err(Error::Validation(format!(
            "no step in a {horizon}-step window places the peak `{}` and trough `{}` as requested",
            action.peak_timing_bin, action.trough_timing_bin
        )));
    }

    let specs = scored_field_specs(horizon);
    let sigma = config.level_sigma[level_index(action.volatility_level)] * start * noise_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let budget = config.candidates.max(1);
    for c in 0..budget {
        let path = if action.monotonicity != Monotonicity::Mixed && c % 4 == 3 {
            monotone_path(action, horizon, &mut rng)
        } else {
            let &(p, q) = pairs.choose(&mut rng).expect("non-empty");
            let amplitude = sigma * AMPLITUDE_SCHEDULE[c % AMPLITUDE_SCHEDULE.len()];
            bridge_path(action, horizon, p, q, amplitude, &mut rng)
        };
        let derived = derive_action(&path, binning)?;
        let guaranteed = derived.direction == action.direction
            && derived.peak_timing_bin == action.peak_timing_bin
            && derived.trough_timing_bin == action.trough_timing_bin
            && derived.max_value == action.max_value
            && derived.min_value == action.min_value;
        if !guaranteed {
            continue;
        }
        let score = action_agreement(action, &derived, &specs).unwrap_or(0.0);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            let done = score >= 1.0;
            best = Some((score, path));
            if done {
                break;
            }
        }
    }
    let (_, closes) =
        best.ok_or_else(|| Error::Validation("no candidate path satisfied the pinned action fields".into()))?;
    Ok(TrajectoryForecast::from_closes(closes))
}

/// Upper-bound forecaster: predicts exactly what happened.
pub fn oracle_forecaster(future: &OhlcvSeries) -> TrajectoryForecast {
    TrajectoryForecast {
        closes: future.closes(),
        variances: Some(vec![0.0; future.len()]),
        high_quantiles: None,
        low_quantiles: None,
        volumes: Some(future.volumes()),
    }
}

pub const RANDOM_WALK_VOL_WINDOW: usize = 20;

/// Drift-free geometric random walk from the last close, with per-step
/// volatility estimated from the trailing 20 daily log-returns.
pub fn random_walk_forecaster(history: &OhlcvSeries, horizon: usize, seed: u64) -> Result<TrajectoryForecast> {
    if history.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: history.len(),
        });
    }
    let closes = history.closes();
    let tail = &closes[closes.len().saturating_sub(RANDOM_WALK_VOL_WINDOW + 1)..];
    let sigma = stats::pop_std(&stats::log_returns(tail));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = *closes.last().expect("non-empty");
    let mut path = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let z: f64 = rng.sample(StandardNormal);
        last *= (sigma * z).exp();
        path.push(last);
    }
    Ok(TrajectoryForecast {
        closes: path,
        variances: Some(vec![sigma * sigma; horizon]),
        high_quantiles: None,
        low_quantiles: None,
        volumes: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Direction;
    use crate::market_data::OhlcvBar;
    use chrono::NaiveDate;

    fn uptrend_action() -> ForecastAction {
        let closes: Vec<f64> = (0..10).map(|i| 100.0 + 2.0 * i as f64).collect();
        derive_action(&closes, &BinningConfig::default()).unwrap()
    }

    fn gen(action: &ForecastAction, seed: u64, noise: f64) -> Vec<f64> {
        generate_from_action(
            action,
            10,
            seed,
            noise,
            &BinningConfig::default(),
            &GeneratorConfig::default(),
        )
        .unwrap()
        .closes
    }

    fn series(closes: &[f64]) -> OhlcvSeries {
        let d0 = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let bars = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| OhlcvBar {
                date: d0 + chrono::Duration::days(i as i64),
                open: c,
                high: c,
                low: c,
                close: c,
                volume: 10.0,
            })
            .collect();
        OhlcvSeries::new("T", bars).unwrap()
    }

    #[test]
    fn uptrend_endpoints_pinned() {
        let a = uptrend_action();
        for seed in 0..5 {
            let path = gen(&a, seed, 1.0);
            assert_eq!(path[0], 100.0);
            assert_eq!(path[9], 118.0);
            let d = derive_action(&path, &BinningConfig::default()).unwrap();
            assert_eq!(d.direction, Direction::Up);
        }
    }

    #[test]
    fn flat_action_constant_path() {
        let a = derive_action(&[100.0; 10], &BinningConfig::default()).unwrap();
        assert_eq!(gen(&a, 1, 0.0), vec![100.0; 10]);
    }

    #[test]
    fn seeded_determinism() {
        let closes = [100.0, 97.0, 99.0, 103.0, 101.0, 98.0, 96.0, 99.5, 102.0, 101.0];
        let a = derive_action(&closes, &BinningConfig::default()).unwrap();
        let p1 = gen(&a, 7, 1.0);
        assert_eq!(p1, gen(&a, 7, 1.0));
        let p2 = gen(&a, 8, 1.0);
        assert_ne!(p1, p2);
        for p in [&p1, &p2] {
            let d = derive_action(p, &BinningConfig::default()).unwrap();
            assert_eq!(d.start_value, a.start_value);
            assert_eq!(d.end_value, a.end_value);
            assert_eq!(d.max_value, a.max_value);
            assert_eq!(d.min_value, a.min_value);
        }
    }

    #[test]
    fn unsatisfiable_action_rejected() {
        let mut a = uptrend_action();
        a.max_value = 90.0;
        let err = generate_from_action(&a, 10, 0, 1.0, &BinningConfig::default(), &GeneratorConfig::default());
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn oracle_is_identity() {
        let fut = series(&[10.0, 11.0, 12.0]);
        let f = oracle_forecaster(&fut);
        assert_eq!(f.closes, fut.closes());
        let a = derive_action(&f.closes, &BinningConfig::default()).unwrap();
        assert_eq!(a, derive_action(&fut.closes(), &BinningConfig::default()).unwrap());
    }

    #[test]
    fn random_walk_constant_history() {
        let f = random_walk_forecaster(&series(&[50.0; 30]), 10, 3).unwrap();
        assert_eq!(f.closes, vec![50.0; 10]);
        assert_eq!(f.variances.unwrap(), vec![0.0; 10]);
    }

    #[test]
    fn random_walk_uncertainty_linear_in_horizon() {
        let closes: Vec<f64> = (0..40).map(|i| 100.0 + if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let h = series(&closes);
        let u = |s| {
            random_walk_forecaster(&h, s, 0)
                .unwrap()
                .variances
                .unwrap()
                .iter()
                .sum::<f64>()
        };
        let (u5, u10, u20) = (u(5), u(10), u(20));
        assert!(u5 > 0.0);
        assert!((u10 - 2.0 * u5).abs() < 1e-12);
        assert!((u20 - 4.0 * u5).abs() < 1e-12);
    }

    #[test]
    fn random_walk_is_drift_free() {
        // Mean one-step log-return over 10^4 seeds lies within 3 standard errors of 0.
        let closes: Vec<f64> = (0..40).map(|i| 100.0 * (1.0 + 0.01 * ((i % 3) as f64 - 1.0))).collect();
        let h = series(&closes);
        let last = *closes.last().unwrap();
        let draws: Vec<f64> = (0..10_000u64)
            .map(|seed| (random_walk_forecaster(&h, 1, seed).unwrap().closes[0] / last).ln())
            .collect();
        let m = stats::mean(&draws);
        let se = stats::pop_std(&draws) / (draws.len() as f64).sqrt();
        assert!(m.abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn forecast_shape_checked() {
        let mut f = TrajectoryForecast::from_closes(vec![1.0, 2.0]);
        f.validate().unwrap();
        f.variances = Some(vec![0.1]);
        assert!(matches!(f.validate(), Err(Error::Shape(_))));
    }
}
