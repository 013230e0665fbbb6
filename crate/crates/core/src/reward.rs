//! Rollout rewards: answer correctness, action accuracy against the realized
//! profile, forecast precision, and action/trajectory consistency, combined as
//! `R = r_ans + alpha * r_act + beta * r_prec + gamma * r_cons`.

use serde::{Deserialize, Serialize};

use crate::action::{
    action_agreement, derive_action, scored_field_specs, validate, BinningConfig, FieldSpec, ForecastAction, Violation,
};
use crate::decoder::TrajectoryForecast;
use crate::error::{Error, Result};
use crate::stats;

const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Number(f64),
    Text(String),
}

impl Answer {
    fn as_text(&self) -> String {
        match self {
            Answer::Number(n) => n.to_string(),
            Answer::Text(s) => s.clone(),
        }
    }

    fn as_number(&self) -> Option<f64> {
        match self {
            Answer::Number(n) => Some(*n),
            Answer::Text(s) => {
                let cleaned: String = s
                    .trim()
                    .trim_end_matches('%')
                    .chars()
                    .filter(|c| !c.is_whitespace() && *c != ',')
                    .collect();
                cleaned.parse().ok()
            }
        }
        .filter(|v: &f64| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedPath {
    pub closes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volumes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub predicted_answer: Answer,
    pub gold_answer: Answer,
    pub task_kind: TaskKind,
    pub action: ForecastAction,
    pub forecast: TrajectoryForecast,
    pub realized: RealizedPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Relative tolerance for numeric answers; credit decays linearly to zero at twice this.
    pub answer_tolerance: f64,
    /// Scale of the MAPE decay in forecast precision.
    pub precision_scale: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.0,
            answer_tolerance: 0.05,
            precision_scale: 0.05,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("answer_tolerance", self.answer_tolerance),
            ("precision_scale", self.precision_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn max_total(&self) -> f64 {
        1.0 + self.alpha + self.beta + self.gamma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ans: f64,
    pub r_act: f64,
    pub r_prec: f64,
    pub r_cons: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl RewardBreakdown {
    pub fn from_components(r_ans: f64, r_act: f64, r_prec: f64, r_cons: f64, w: &RewardWeights) -> Self {
        RewardBreakdown {
            r_ans,
            r_act,
            r_prec,
            r_cons,
            total: r_ans + w.alpha * r_act + w.beta * r_prec + w.gamma * r_cons,
            diagnostics: Vec::new(),
        }
    }
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Exact normalized match for categorical tasks. Numeric tasks get full
/// credit within `tolerance * max(|gold|, eps)` and linear decay to zero at
/// twice that distance; an unparseable prediction scores zero.
pub fn answer_reward(predicted: &Answer, gold: &Answer, kind: TaskKind, tolerance: f64) -> Result<f64> {
    match kind {
        TaskKind::Categorical => Ok(
            if normalize_text(&predicted.as_text()) == normalize_text(&gold.as_text()) {
                1.0
            } else {
                0.0
            },
        ),
        TaskKind::Numeric => {
            let g = gold
                .as_number()
                .ok_or_else(|| Error::Validation(format!("gold answer `{}` is not numeric", gold.as_text())))?;
            let Some(p) = predicted.as_number() else {
                return Ok(0.0);
            };
            let band = tolerance * g.abs().max(EPS);
            let dist = (p - g).abs();
            Ok(if dist <= band {
                1.0
            } else {
                (2.0 - dist / band).clamp(0.0, 1.0)
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionAccuracy {
    pub score: f64,
    pub violations: Vec<Violation>,
}

/// Mean field similarity over the scored fields. Invalid actions score zero
/// and report their violations.
pub fn action_accuracy(predicted: &ForecastAction, target: &ForecastAction, specs: &[FieldSpec]) -> ActionAccuracy {
    let mut violations = validate(predicted);
    violations.extend(validate(target));
    if !violations.is_empty() {
        return ActionAccuracy { score: 0.0, violations };
    }
    match action_agreement(predicted, target, specs) {
        Ok(score) => ActionAccuracy { score, violations },
        Err(e) => ActionAccuracy {
            score: 0.0,
            violations: vec![Violation {
                fields: Vec::new(),
                message: e.to_string(),
            }],
        },
    }
}

/// `0.5 * exp(-MAPE / scale) + 0.5 * DA`, where DA is 1 when the forecast and
/// realized paths end with the same sign of cumulative return (last over
/// first step).
pub fn forecast_precision(forecast: &[f64], realized: &[f64], scale: f64) -> Result<f64> {
    if forecast.len() != realized.len() {
        return Err(Error::Shape(format!(
            "forecast has {} steps, realized has {}",
            forecast.len(),
            realized.len()
        )));
    }
    if forecast.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mape = forecast
        .iter()
        .zip(realized)
        .map(|(f, r)| (f - r).abs() / r.abs().max(EPS))
        .sum::<f64>()
        / forecast.len() as f64;
    let cumulative = |path: &[f64]| path[path.len() - 1] / path[0].abs().max(EPS) - 1.0;
    let hit = stats::sign(cumulative(forecast)) == stats::sign(cumulative(realized));
    let score = 0.5 * (-mape / scale).exp() + if hit { 0.5 } else { 0.0 };
    Ok(score.clamp(0.0, 1.0))
}

/// Agreement between the emitted action and the profile of the generated trajectory.
pub fn consistency_reward(
    action: &ForecastAction,
    forecast_closes: &[f64],
    config: &BinningConfig,
    specs: &[FieldSpec],
) -> Result<ActionAccuracy> {
    let profile = derive_action(forecast_closes, config)?;
    Ok(action_accuracy(action, &profile, specs))
}

/// All four components and the weighted total. A component that cannot be
/// computed contributes zero and leaves a diagnostic.
pub fn total_reward(record: &RolloutRecord, weights: &RewardWeights, config: &BinningConfig) -> RewardBreakdown {
    let mut diagnostics = Vec::new();

    let r_ans = answer_reward(
        &record.predicted_answer,
        &record.gold_answer,
        record.task_kind,
        weights.answer_tolerance,
    );
    let r_prec = forecast_precision(
        &record.forecast.closes,
        &record.realized.closes,
        weights.precision_scale,
    );
    let r_act = derive_action(&record.realized.closes, config).map(|target| {
        action_accuracy(
            &record.action,
            &target,
            &scored_field_specs(record.realized.closes.len()),
        )
    });
    let r_cons = consistency_reward(
        &record.action,
        &record.forecast.closes,
        config,
        &scored_field_specs(record.forecast.closes.len()),
    );

    let mut scalar = |name: &str, r: Result<f64>| match r {
        Ok(v) => v,
        Err(e) => {
            diagnostics.push(format!("{name}: {e}"));
            0.0
        }
    };
    let r_ans = scalar("r_ans", r_ans);
    let r_prec = scalar("r_prec", r_prec);

    let mut accuracy = |name: &str, r: Result<ActionAccuracy>| match r {
        Ok(acc) => {
            diagnostics.extend(acc.violations.iter().map(|v| format!("{name}: {v}")));
            acc.score
        }
        Err(e) => {
            diagnostics.push(format!("{name}: {e}"));
            0.0
        }
    };
    let r_act = accuracy("r_act", r_act);
    let r_cons = accuracy("r_cons", r_cons);

    let mut out = RewardBreakdown::from_components(r_ans, r_act, r_prec, r_cons, weights);
    out.diagnostics = diagnostics;
    out
}
