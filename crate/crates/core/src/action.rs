//! Field-factorized forecast actions.
//!
//! A [`ForecastAction`] summarizes a close-price trajectory with numeric
//! summaries, ordinal market-state bins and temporal shape descriptors.
//! [`derive_action`] is the deterministic map from a trajectory to its
//! action; it is used both to build targets from realized prices and to
//! profile generated forecasts.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::stats;

/// Absolute tolerance on recomputed percentage fields.
pub const PCT_TOLERANCE: f64 = 0.02;

/// Closed vocabulary shared by every enumerated action field.
pub trait Level: Copy + Eq + Sized + 'static {
    const LABELS: &'static [&'static str];
    fn from_rank(rank: usize) -> Self;
    fn rank(self) -> usize;

    fn label(self) -> &'static str {
        Self::LABELS[self.rank()]
    }

    fn from_label(s: &str) -> Option<Self> {
        Self::LABELS.iter().position(|l| *l == s).map(Self::from_rank)
    }
}

macro_rules! level_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl Level for $name {
            const LABELS: &'static [&'static str] = &[$($label),+];

            fn from_rank(rank: usize) -> Self {
                const ALL: &[$name] = &[$($name::$variant),+];
                ALL[rank]
            }

            fn rank(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

level_enum!(
    /// Ordered down < flat < up, but scored as a categorical field.
    Direction { Down => "down", Flat => "flat", Up => "up" }
);
level_enum!(
    /// Used by `volatility_level`, `max_drawdown_bin` and `tail_risk_level`.
    RiskLevel { Low => "low", Medium => "medium", High => "high" }
);
level_enum!(RangeWidth { Narrow => "narrow", Moderate => "moderate", Wide => "wide" });
level_enum!(Timing { Early => "early", Middle => "middle", Late => "late" });
level_enum!(Monotonicity { Increasing => "increasing", Decreasing => "decreasing", Mixed => "mixed" });
level_enum!(TrendFit { Weak => "weak", Moderate => "moderate", Strong => "strong" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastAction {
    pub future_window: String,
    pub start_value: f64,
    pub end_value: f64,
    pub max_value: f64,
    pub min_value: f64,
    pub mean_close: f64,

    pub direction: Direction,
    pub end_change_pct: f64,
    pub range_pct: f64,
    pub volatility_level: RiskLevel,
    pub range_width_bin: RangeWidth,
    pub max_drawdown_bin: RiskLevel,

    pub turning_point_count: u32,
    pub peak_timing_bin: Timing,
    pub trough_timing_bin: Timing,
    pub monotonicity: Monotonicity,
    pub trendline_fit: TrendFit,
    pub tail_risk_level: RiskLevel,
}

/// Label for a forecast window covering steps `t+1..t+horizon`.
pub fn future_window_label(horizon: usize) -> String {
    format!("t+1_t+{horizon}")
}

/// Parses a `t+1_t+S` label back to `S`.
pub fn parse_future_window(label: &str) -> Option<usize> {
    let rest = label.strip_prefix("t+1_t+")?;
    rest.parse::<usize>().ok().filter(|&s| s >= 1)
}

impl ForecastAction {
    pub fn horizon(&self) -> Option<usize> {
        parse_future_window(&self.future_window)
    }

    /// Label of a scored (categorical or ordinal) field, by JSON name.
    pub fn scored_value(&self, field: &str) -> Option<String> {
        let v = match field {
            "direction" => self.direction.label().to_string(),
            "volatility_level" => self.volatility_level.label().to_string(),
            "range_width_bin" => self.range_width_bin.label().to_string(),
            "max_drawdown_bin" => self.max_drawdown_bin.label().to_string(),
            "turning_point_count" => self.turning_point_count.to_string(),
            "peak_timing_bin" => self.peak_timing_bin.label().to_string(),
            "trough_timing_bin" => self.trough_timing_bin.label().to_string(),
            "monotonicity" => self.monotonicity.label().to_string(),
            "trendline_fit" => self.trendline_fit.label().to_string(),
            "tail_risk_level" => self.tail_risk_level.label().to_string(),
            _ => return None,
        };
        Some(v)
    }

    fn numeric_fields(&self) -> [(&'static str, f64); 7] {
        [
            ("start_value", self.start_value),
            ("end_value", self.end_value),
            ("max_value", self.max_value),
            ("min_value", self.min_value),
            ("mean_close", self.mean_close),
            ("end_change_pct", self.end_change_pct),
            ("range_pct", self.range_pct),
        ]
    }
}

/// Thresholds used to bin a trajectory into an action. Edge pairs split
/// three levels: `value < edges[0]`, `value < edges[1]`, otherwise the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    /// `|end_change_pct|` at or below this is `flat`.
    pub flat_threshold_pct: f64,
    /// Annualized realized volatility, percent.
    pub volatility_edges_pct: [f64; 2],
    pub range_width_edges_pct: [f64; 2],
    /// Peak-to-trough decline, percent of peak.
    pub drawdown_edges_pct: [f64; 2],
    /// Largest single-step |log-return|, percent.
    pub tail_risk_edges_pct: [f64; 2],
    /// |Pearson correlation| of close against time.
    pub trendline_edges: [f64; 2],
    /// Reversal size needed before a turning point counts.
    pub turning_point_min_move_pct: f64,
    /// Upper bounds of the `early` and `middle` timing bins as fractions of
    /// the horizon (step `h` of `S` sits at `h / S`).
    pub timing_boundaries: [f64; 2],
    pub trading_days_per_year: f64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            flat_threshold_pct: 0.5,
            volatility_edges_pct: [15.0, 30.0],
            range_width_edges_pct: [3.0, 8.0],
            drawdown_edges_pct: [2.0, 5.0],
            tail_risk_edges_pct: [2.0, 4.0],
            trendline_edges: [0.4, 0.8],
            turning_point_min_move_pct: 0.25,
            timing_boundaries: [1.0 / 3.0, 2.0 / 3.0],
            trading_days_per_year: 252.0,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = |name: &str, e: [f64; 2]| {
            if e.iter().all(|v| v.is_finite()) && e[0] < e[1] {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be strictly increasing, got {e:?}")))
            }
        };
        increasing("volatility_edges_pct", self.volatility_edges_pct)?;
        increasing("range_width_edges_pct", self.range_width_edges_pct)?;
        increasing("drawdown_edges_pct", self.drawdown_edges_pct)?;
        increasing("tail_risk_edges_pct", self.tail_risk_edges_pct)?;
        increasing("trendline_edges", self.trendline_edges)?;
        increasing("timing_boundaries", self.timing_boundaries)?;
        if !(self.timing_boundaries[0] > 0.0 && self.timing_boundaries[1] < 1.0) {
            return Err(Error::Config("timing_boundaries must lie in (0, 1)".into()));
        }
        for (name, v) in [
            ("flat_threshold_pct", self.flat_threshold_pct),
            ("turning_point_min_move_pct", self.turning_point_min_move_pct),
            ("trading_days_per_year", self.trading_days_per_year),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn timing_bin(&self, index: usize, horizon: usize) -> Timing {
        let frac = (index + 1) as f64 / horizon as f64;
        if frac <= self.timing_boundaries[0] {
            Timing::Early
        } else if frac <= self.timing_boundaries[1] {
            Timing::Middle
        } else {
            Timing::Late
        }
    }

    pub fn direction(&self, end_change_pct: f64) -> Direction {
        if end_change_pct > self.flat_threshold_pct {
            Direction::Up
        } else if end_change_pct < -self.flat_threshold_pct {
            Direction::Down
        } else {
            Direction::Flat
        }
    }
}

fn bin3<L: Level>(value: f64, edges: [f64; 2]) -> L {
    let rank = if value < edges[0] {
        0
    } else if value < edges[1] {
        1
    } else {
        2
    };
    L::from_rank(rank)
}

/// Index of the first maximum (`better(a, b)` = a strictly beats b).
fn first_extreme(xs: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if better(x, xs[best]) {
            best = i;
        }
    }
    best
}

/// Largest peak-to-trough decline as a fraction of the running peak.
pub fn max_drawdown(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut mdd: f64 = 0.0;
    for &v in values {
        peak = peak.max(v);
        if peak > 0.0 {
            mdd = mdd.max((peak - v) / peak);
        }
    }
    mdd
}

/// Reversals of a zigzag filter: a turning point is counted when price
/// retraces at least `min_move` (fraction) from the running extreme of the
/// current swing.
pub fn count_turning_points(closes: &[f64], min_move: f64) -> u32 {
    #[derive(PartialEq)]
    enum Swing {
        Unknown,
        Up,
        Down,
    }
    let Some(&first) = closes.first() else {
        return 0;
    };
    let mut swing = Swing::Unknown;
    let (mut hi, mut lo, mut extreme) = (first, first, first);
    let mut count = 0;
    for &p in &closes[1..] {
        match swing {
            Swing::Unknown => {
                hi = hi.max(p);
                lo = lo.min(p);
                if p >= lo * (1.0 + min_move) {
                    swing = Swing::Up;
                    extreme = p;
                } else if p <= hi * (1.0 - min_move) {
                    swing = Swing::Down;
                    extreme = p;
                }
            }
            Swing::Up => {
                if p > extreme {
                    extreme = p;
                } else if p <= extreme * (1.0 - min_move) {
                    count += 1;
                    swing = Swing::Down;
                    extreme = p;
                }
            }
            Swing::Down => {
                if p < extreme {
                    extreme = p;
                } else if p >= extreme * (1.0 + min_move) {
                    count += 1;
                    swing = Swing::Up;
                    extreme = p;
                }
            }
        }
    }
    count
}

/// Derives the action profile of a close trajectory.
pub fn derive_action(closes: &[f64], config: &BinningConfig) -> Result<ForecastAction> {
    let n = closes.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if let Some((i, p)) = closes.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::Validation(format!(
            "close at step {} must be a positive price, got {p}",
            i + 1
        )));
    }

    let start = closes[0];
    let end = closes[n - 1];
    let argmax = first_extreme(closes, |a, b| a > b);
    let argmin = first_extreme(closes, |a, b| a < b);
    let max = closes[argmax];
    let min = closes[argmin];
    let end_change_pct = 100.0 * (end - start) / start;
    let range_pct = 100.0 * (max - min) / start;

    let log_returns = stats::log_returns(closes);
    let mean_sq = log_returns.iter().map(|r| r * r).sum::<f64>() / log_returns.len() as f64;
    let annual_vol_pct = 100.0 * (mean_sq * config.trading_days_per_year).sqrt();
    let tail_pct = 100.0 * log_returns.iter().fold(0.0f64, |m, r| m.max(r.abs()));

    let diffs: Vec<f64> = closes.windows(2).map(|w| w[1] - w[0]).collect();
    let monotonicity = if diffs.iter().all(|d| *d >= 0.0) {
        Monotonicity::Increasing
    } else if diffs.iter().all(|d| *d <= 0.0) {
        Monotonicity::Decreasing
    } else {
        Monotonicity::Mixed
    };

    let time: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let fit = stats::pearson(&time, closes).map(f64::abs).unwrap_or(0.0);

    Ok(ForecastAction {
        future_window: future_window_label(n),
        start_value: start,
        end_value: end,
        max_value: max,
        min_value: min,
        mean_close: stats::mean(closes),
        direction: config.direction(end_change_pct),
        end_change_pct,
        range_pct,
        volatility_level: bin3(annual_vol_pct, config.volatility_edges_pct),
        range_width_bin: bin3(range_pct, config.range_width_edges_pct),
        max_drawdown_bin: bin3(100.0 * max_drawdown(closes), config.drawdown_edges_pct),
        turning_point_count: count_turning_points(closes, config.turning_point_min_move_pct / 100.0),
        peak_timing_bin: config.timing_bin(argmax, n),
        trough_timing_bin: config.timing_bin(argmin, n),
        monotonicity,
        trendline_fit: bin3(fit, config.trendline_edges),
        tail_risk_level: bin3(tail_pct, config.tail_risk_edges_pct),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub fields: Vec<String>,
    pub message: String,
}

impl Violation {
    fn new(fields: &[&str], message: impl Into<String>) -> Self {
        Violation {
            fields: fields.iter().map(|f| f.to_string()).collect(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.fields.join(", "), self.message)
    }
}

/// Lists every violated invariant of an action. Empty means valid.
pub fn validate(action: &ForecastAction) -> Vec<Violation> {
    let mut out = Vec::new();

    let horizon = action.horizon();
    match horizon {
        None => out.push(Violation::new(
            &["future_window"],
            format!("expected `t+1_t+S`, got `{}`", action.future_window),
        )),
        Some(s) if s < 2 => out.push(Violation::new(&["future_window"], "horizon must be at least 2")),
        Some(s) => {
            if action.turning_point_count as usize > s - 2 {
                out.push(Violation::new(
                    &["turning_point_count", "future_window"],
                    format!(
                        "{} turning points cannot fit in a {s}-step window",
                        action.turning_point_count
                    ),
                ));
            }
        }
    }

    let non_finite: Vec<&str> = action
        .numeric_fields()
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, _)| *n)
        .collect();
    if !non_finite.is_empty() {
        out.push(Violation::new(&non_finite, "numeric fields must be finite"));
        return out;
    }
    if action.start_value <= 0.0 {
        out.push(Violation::new(&["start_value"], "start_value must be positive"));
        return out;
    }

    if action.min_value > action.max_value {
        out.push(Violation::new(
            &["min_value", "max_value"],
            format!("min_value {} exceeds max_value {}", action.min_value, action.max_value),
        ));
    }
    for (name, v) in [
        ("start_value", action.start_value),
        ("end_value", action.end_value),
        ("mean_close", action.mean_close),
    ] {
        if v < action.min_value {
            out.push(Violation::new(
                &[name, "min_value"],
                format!("{name} {v} below min_value {}", action.min_value),
            ));
        }
        if v > action.max_value {
            out.push(Violation::new(
                &[name, "max_value"],
                format!("{name} {v} above max_value {}", action.max_value),
            ));
        }
    }

    let expected_change = 100.0 * (action.end_value - action.start_value) / action.start_value;
    if (action.end_change_pct - expected_change).abs() > PCT_TOLERANCE + 1e-9 {
        out.push(Violation::new(
            &["end_change_pct", "start_value", "end_value"],
            format!(
                "end_change_pct {} inconsistent with endpoints ({expected_change:.4})",
                action.end_change_pct
            ),
        ));
    }
    let expected_range = 100.0 * (action.max_value - action.min_value) / action.start_value;
    if (action.range_pct - expected_range).abs() > PCT_TOLERANCE + 1e-9 {
        out.push(Violation::new(
            &["range_pct", "max_value", "min_value", "start_value"],
            format!(
                "range_pct {} inconsistent with extremes ({expected_range:.4})",
                action.range_pct
            ),
        ));
    }
    out
}

const KEY_ALIASES: &[(&str, &str)] = &[
    ("volatility", "volatility_level"),
    ("peak_timing", "peak_timing_bin"),
    ("trough_timing", "trough_timing_bin"),
    ("tail_risk", "tail_risk_level"),
];

const ENUM_FIELDS: &[(&str, &[&str])] = &[
    ("direction", Direction::LABELS),
    ("volatility_level", RiskLevel::LABELS),
    ("range_width_bin", RangeWidth::LABELS),
    ("max_drawdown_bin", RiskLevel::LABELS),
    ("peak_timing_bin", Timing::LABELS),
    ("trough_timing_bin", Timing::LABELS),
    ("monotonicity", Monotonicity::LABELS),
    ("trendline_fit", TrendFit::LABELS),
    ("tail_risk_level", RiskLevel::LABELS),
];

const NUMBER_FIELDS: &[&str] = &[
    "start_value",
    "end_value",
    "max_value",
    "min_value",
    "mean_close",
    "end_change_pct",
    "range_pct",
];

/// Parses an action from a JSON value, accepting the short key spellings
/// (`volatility`, `peak_timing`, `trough_timing`, `tail_risk`) as aliases.
pub fn from_json_value(value: &Value) -> Result<ForecastAction> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Validation("action must be a JSON object".into()))?;
    let mut canonical = Map::new();
    for (k, v) in obj {
        let key = KEY_ALIASES
            .iter()
            .find(|(alias, _)| alias == k)
            .map(|(_, c)| *c)
            .unwrap_or(k.as_str());
        // An explicit canonical key wins over its alias.
        if key != k && obj.contains_key(key) {
            continue;
        }
        canonical.insert(key.to_string(), v.clone());
    }

    let require = |name: &str| canonical.get(name).ok_or_else(|| Error::MissingField(name.into()));
    match require("future_window")? {
        Value::String(_) => {}
        other => {
            return Err(Error::Validation(format!(
                "field `future_window` must be a string, got {other}"
            )))
        }
    }
    for name in NUMBER_FIELDS {
        if !require(name)?.is_number() {
            return Err(Error::Validation(format!("field `{name}` must be a number")));
        }
    }
    for (name, labels) in ENUM_FIELDS {
        let v = require(name)?;
        let s = v.as_str().ok_or_else(|| Error::UnknownEnum {
            field: name.to_string(),
            value: v.to_string(),
        })?;
        if !labels.contains(&s) {
            return Err(Error::UnknownEnum {
                field: name.to_string(),
                value: s.to_string(),
            });
        }
    }
    if require("turning_point_count")?.as_u64().is_none() {
        return Err(Error::Validation(
            "field `turning_point_count` must be a non-negative integer".into(),
        ));
    }
    Ok(serde_json::from_value(Value::Object(canonical))?)
}

pub fn parse_json(text: &str) -> Result<ForecastAction> {
    let value: Value = serde_json::from_str(text)?;
    from_json_value(&value)
}

/// Canonical form: schema key order, two-space indentation.
pub fn serialize_json(action: &ForecastAction) -> String {
    serde_json::to_string_pretty(action).expect("actions always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Ordinal,
    NumericSummary,
}

/// Scoring description of one action field. Ordinal `levels` are listed in
/// rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub levels: Vec<String>,
}

impl FieldSpec {
    fn enumerated<L: Level>(name: &str, kind: FieldKind) -> Self {
        FieldSpec {
            name: name.into(),
            kind,
            levels: L::LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn rank(&self, value: &str) -> Result<usize> {
        self.levels
            .iter()
            .position(|l| l == value)
            .ok_or_else(|| Error::Domain(format!("value `{value}` not in the domain of `{}`", self.name)))
    }
}

/// The ten categorical and ordinal fields entering action scores.
/// `turning_point_count` is ordinal over `0..=horizon-2`.
pub fn scored_field_specs(horizon: usize) -> Vec<FieldSpec> {
    use FieldKind::*;
    let max_turns = horizon.saturating_sub(2);
    vec![
        FieldSpec::enumerated::<Direction>("direction", Categorical),
        FieldSpec::enumerated::<RiskLevel>("volatility_level", Ordinal),
        FieldSpec::enumerated::<RangeWidth>("range_width_bin", Ordinal),
        FieldSpec::enumerated::<RiskLevel>("max_drawdown_bin", Ordinal),
        FieldSpec {
            name: "turning_point_count".into(),
            kind: Ordinal,
            levels: (0..=max_turns).map(|i| i.to_string()).collect(),
        },
        FieldSpec::enumerated::<Timing>("peak_timing_bin", Ordinal),
        FieldSpec::enumerated::<Timing>("trough_timing_bin", Ordinal),
        FieldSpec::enumerated::<Monotonicity>("monotonicity", Categorical),
        FieldSpec::enumerated::<TrendFit>("trendline_fit", Ordinal),
        FieldSpec::enumerated::<RiskLevel>("tail_risk_level", Ordinal),
    ]
}

/// Scored fields plus the numeric summaries, which are only consistency-checked.
pub fn all_field_specs(horizon: usize) -> Vec<FieldSpec> {
    let mut specs = vec![FieldSpec {
        name: "future_window".into(),
        kind: FieldKind::NumericSummary,
        levels: Vec::new(),
    }];
    specs.extend(NUMBER_FIELDS.iter().map(|n| FieldSpec {
        name: n.to_string(),
        kind: FieldKind::NumericSummary,
        levels: Vec::new(),
    }));
    specs.extend(scored_field_specs(horizon));
    specs
}

/// Exact match for categorical fields; `1 - |rank(a) - rank(b)| / (m - 1)`
/// for ordinal fields with `m` levels.
pub fn field_similarity(spec: &FieldSpec, a: &str, b: &str) -> Result<f64> {
    match spec.kind {
        FieldKind::NumericSummary => Err(Error::Domain(format!(
            "`{}` is a numeric summary and is not scored",
            spec.name
        ))),
        FieldKind::Categorical => {
            spec.rank(a)?;
            spec.rank(b)?;
            Ok(if a == b { 1.0 } else { 0.0 })
        }
        FieldKind::Ordinal => {
            let (ra, rb) = (spec.rank(a)?, spec.rank(b)?);
            let m = spec.levels.len();
            if m < 2 {
                return Ok(1.0);
            }
            Ok(1.0 - ra.abs_diff(rb) as f64 / (m - 1) as f64)
        }
    }
}

/// Mean field similarity over `specs` between two actions. Values outside a
/// field's domain are errors.
pub fn action_agreement(a: &ForecastAction, b: &ForecastAction, specs: &[FieldSpec]) -> Result<f64> {
    let scored: Vec<&FieldSpec> = specs.iter().filter(|s| s.kind != FieldKind::NumericSummary).collect();
    if scored.is_empty() {
        return Err(Error::Domain("no scored fields".into()));
    }
    let mut total = 0.0;
    for spec in &scored {
        let missing = || Error::Domain(format!("`{}` is not a scored action field", spec.name));
        let va = a.scored_value(&spec.name).ok_or_else(missing)?;
        let vb = b.scored_value(&spec.name).ok_or_else(missing)?;
        total += field_similarity(spec, &va, &vb)?;
    }
    Ok(total / scored.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uptrend() -> Vec<f64> {
        (0..10).map(|i| 100.0 + 2.0 * i as f64).collect()
    }

    const SKELETON: &str = r#"{
      "future_window": "t+1_t+10",
      "start_value": 86.0,
      "end_value": 83.6,
      "max_value": 86.0,
      "min_value": 77.6,
      "mean_close": 81.3,
      "direction": "down",
      "end_change_pct": -2.79,
      "range_pct": 9.77,
      "volatility_level": "medium",
      "range_width_bin": "wide",
      "max_drawdown_bin": "high",
      "turning_point_count": 3,
      "peak_timing_bin": "early",
      "trough_timing_bin": "middle",
      "monotonicity": "mixed",
      "trendline_fit": "weak",
      "tail_risk_level": "medium"
    }"#;

    #[test]
    fn uptrend_profile() {
        let a = derive_action(&uptrend(), &BinningConfig::default()).unwrap();
        assert_eq!(a.direction, Direction::Up);
        assert_eq!(a.monotonicity, Monotonicity::Increasing);
        assert_eq!(a.turning_point_count, 0);
        assert!((a.end_change_pct - 18.0).abs() < 1e-12);
        assert_eq!(a.peak_timing_bin, Timing::Late);
        assert_eq!(a.trough_timing_bin, Timing::Early);
        assert_eq!(a.future_window, "t+1_t+10");
        assert_eq!(a.trendline_fit, TrendFit::Strong);
        assert!(validate(&a).is_empty());
    }

    #[test]
    fn constant_profile() {
        let a = derive_action(&[100.0; 10], &BinningConfig::default()).unwrap();
        assert_eq!(a.direction, Direction::Flat);
        assert_eq!(a.end_change_pct, 0.0);
        assert_eq!(a.range_pct, 0.0);
        assert_eq!(a.turning_point_count, 0);
        assert_eq!(a.trendline_fit, TrendFit::Weak);
    }

    #[test]
    fn dip_and_recover() {
        let closes = [100.0, 90.0, 95.0];
        assert!((max_drawdown(&closes) - 0.10).abs() < 1e-12);
        let a = derive_action(&closes, &BinningConfig::default()).unwrap();
        assert_eq!(a.max_drawdown_bin, RiskLevel::High);
        assert_eq!(a.turning_point_count, 1);
        assert_eq!(a.monotonicity, Monotonicity::Mixed);
    }

    #[test]
    fn small_wiggles_are_filtered() {
        // 0.1% moves stay under the 0.25% reversal filter.
        let closes = [100.0, 100.1, 100.0, 100.1, 100.0, 100.1];
        assert_eq!(count_turning_points(&closes, 0.0025), 0);
        assert_eq!(count_turning_points(&closes, 0.0005), 4);
    }

    #[test]
    fn derive_errors() {
        let cfg = BinningConfig::default();
        assert!(matches!(
            derive_action(&[100.0], &cfg),
            Err(Error::InsufficientData { .. })
        ));
        assert!(matches!(derive_action(&[100.0, 0.0], &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn argmax_ties_pick_earliest() {
        let a = derive_action(&[100.0, 105.0, 101.0, 105.0, 102.0, 103.0], &BinningConfig::default()).unwrap();
        // step 2 of 6 → 0.333.. → early
        assert_eq!(a.peak_timing_bin, Timing::Early);
    }

    #[test]
    fn min_above_max_names_both_fields() {
        let mut a = derive_action(&uptrend(), &BinningConfig::default()).unwrap();
        a.min_value = 200.0;
        let v = validate(&a);
        assert!(v
            .iter()
            .any(|v| v.fields.contains(&"min_value".into()) && v.fields.contains(&"max_value".into())));
    }

    #[test]
    fn end_change_off_by_half_percent() {
        let mut a = derive_action(&uptrend(), &BinningConfig::default()).unwrap();
        a.end_change_pct += 0.5;
        let v = validate(&a);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].fields[0], "end_change_pct");
        a.end_change_pct -= 0.49;
        assert!(validate(&a).is_empty());
    }

    #[test]
    fn skeleton_parses() {
        let a = parse_json(SKELETON).unwrap();
        assert_eq!(a.direction, Direction::Down);
        assert_eq!(a.turning_point_count, 3);
        assert!(validate(&a).is_empty(), "{:?}", validate(&a));
    }

    #[test]
    fn canonical_form_is_stable() {
        let a = parse_json(SKELETON).unwrap();
        let text = serialize_json(&a);
        assert_eq!(serialize_json(&parse_json(&text).unwrap()), text);
        let keys: Vec<String> = serde_json::from_str::<Map<String, Value>>(&text)
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(keys.len(), 18);
        assert!(text.find("\"future_window\"").unwrap() < text.find("\"tail_risk_level\"").unwrap());
    }

    #[test]
    fn missing_direction() {
        let mut v: Value = serde_json::from_str(SKELETON).unwrap();
        v.as_object_mut().unwrap().remove("direction");
        match from_json_value(&v).unwrap_err() {
            Error::MissingField(f) => assert_eq!(f, "direction"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_direction_value() {
        let text = SKELETON.replace("\"down\"", "\"sideways\"");
        match parse_json(&text).unwrap_err() {
            Error::UnknownEnum { field, value } => {
                assert_eq!(field, "direction");
                assert_eq!(value, "sideways");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_key_aliases() {
        let text = SKELETON
            .replace("\"volatility_level\"", "\"volatility\"")
            .replace("\"peak_timing_bin\"", "\"peak_timing\"")
            .replace("\"tail_risk_level\"", "\"tail_risk\"");
        let a = parse_json(&text).unwrap();
        assert_eq!(a, parse_json(SKELETON).unwrap());
        assert!(serialize_json(&a).contains("\"volatility_level\""));
    }

    #[test]
    fn similarity_examples() {
        let specs = scored_field_specs(10);
        let dir = &specs[0];
        let vol = &specs[1];
        assert_eq!(field_similarity(dir, "up", "up").unwrap(), 1.0);
        assert_eq!(field_similarity(dir, "up", "down").unwrap(), 0.0);
        assert_eq!(field_similarity(vol, "low", "high").unwrap(), 0.0);
        assert_eq!(field_similarity(vol, "low", "medium").unwrap(), 0.5);
        assert!(matches!(field_similarity(vol, "low", "extreme"), Err(Error::Domain(_))));
        let num = &all_field_specs(10)[1];
        assert!(field_similarity(num, "1", "1").is_err());
    }

    #[test]
    fn turning_point_levels_follow_horizon() {
        let specs = scored_field_specs(10);
        let tp = specs.iter().find(|s| s.name == "turning_point_count").unwrap();
        assert_eq!(tp.levels.len(), 9);
        assert_eq!(field_similarity(tp, "0", "8").unwrap(), 0.0);
        assert_eq!(field_similarity(tp, "0", "2").unwrap(), 0.75);
    }

    #[test]
    fn default_config_is_valid() {
        BinningConfig::default().validate().unwrap();
        let bad = BinningConfig {
            drawdown_edges_pct: [5.0, 2.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn trajectory() -> impl Strategy<Value = Vec<f64>> {
        (2usize..30, 1.0f64..500.0)
            .prop_flat_map(|(n, start)| (Just(start), prop::collection::vec(-0.06f64..0.06, n - 1)))
            .prop_map(|(start, steps)| {
                let mut p = vec![start];
                for s in steps {
                    let last = *p.last().unwrap();
                    p.push(last * s.exp());
                }
                p
            })
    }

    proptest! {
        #[test]
        fn derived_actions_validate(closes in trajectory()) {
            let a = derive_action(&closes, &BinningConfig::default()).unwrap();
            prop_assert!(validate(&a).is_empty(), "{:?}", validate(&a));
            prop_assert_eq!(&a, &derive_action(&closes, &BinningConfig::default()).unwrap());
        }

        #[test]
        fn monotone_paths_have_no_turns(mut closes in trajectory(), up in any::<bool>()) {
            closes.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if !up {
                closes.reverse();
            }
            let a = derive_action(&closes, &BinningConfig::default()).unwrap();
            prop_assert_eq!(a.turning_point_count, 0);
            prop_assert!(a.monotonicity != Monotonicity::Mixed);
        }

        #[test]
        fn ordinal_similarity_properties(field in 0usize..10, a in 0usize..9, b in 0usize..9, c in 0usize..9) {
            let spec = &scored_field_specs(10)[field];
            let m = spec.levels.len();
            let (a, b, c) = (&spec.levels[a % m], &spec.levels[b % m], &spec.levels[c % m]);
            let ab = field_similarity(spec, a, b).unwrap();
            let ba = field_similarity(spec, b, a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ab == 1.0, a == b);
            if spec.kind == FieldKind::Ordinal {
                let ac = field_similarity(spec, a, c).unwrap();
                let bc = field_similarity(spec, b, c).unwrap();
                prop_assert!(ac >= ab + bc - 1.0 - 1e-12);
            }
        }
    }
}
