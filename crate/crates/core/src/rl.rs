//! Group-relative advantages and uncertainty-aware reweighting.
//!
//! Rewards of the `G` rollouts sampled for one query are z-scored within the
//! group. The whole group is then scaled by a weight `w(U_q)` that decays
//! exponentially once the query's normalized forecast uncertainty passes a
//! stability threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub rewards: Vec<f64>,
    /// Normalized uncertainty in `[0, 1]`.
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyParams {
    pub u0: f64,
    pub u_hi: f64,
    pub w_hi: f64,
    pub u_cap: f64,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        UncertaintyParams {
            u0: 0.25,
            u_hi: 0.50,
            w_hi: 0.50,
            u_cap: 1.0,
        }
    }
}

impl UncertaintyParams {
    /// Decay rate chosen so that `w(u_hi) = w_hi`.
    pub fn decay_rate(&self) -> f64 {
        -self.w_hi.ln()
    }

    pub fn validate(&self) -> Result<()> {
        let ok =
            0.0 <= self.u0 && self.u0 < self.u_hi && self.u_hi <= self.u_cap && self.w_hi > 0.0 && self.w_hi <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "uncertainty params need 0 <= u0 < u_hi <= u_cap and 0 < w_hi <= 1, got {self:?}"
            )))
        }
    }
}

/// `(R_i - mean) / std` with the population standard deviation. A group whose
/// std falls below `eps` carries no signal and gets all-zero advantages.
pub fn group_advantage(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Domain("rewards must be finite".into()));
    }
    let mean = stats::mean(rewards);
    let std = stats::pop_std(rewards);
    if std < eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    /// Sum of predicted variances over steps and channels.
    pub raw: f64,
    /// `min(raw / raw_cap, 1)`.
    pub normalized: f64,
}

/// Aggregates per-step, per-channel predicted variances.
pub fn uncertainty_aggregate(sigma_sq: &[Vec<f64>], raw_cap: f64) -> Result<Uncertainty> {
    if !(raw_cap.is_finite() && raw_cap > 0.0) {
        return Err(Error::Domain(format!("raw cap must be positive, got {raw_cap}")));
    }
    let mut raw = 0.0;
    for (s, step) in sigma_sq.iter().enumerate() {
        for (c, &v) in step.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "variance at step {} channel {c} must be non-negative, got {v}",
                    s + 1
                )));
            }
            raw += v;
        }
    }
    Ok(Uncertainty {
        raw,
        normalized: (raw / raw_cap).min(1.0),
    })
}

/// Normalization cap from a training sample of raw uncertainties: the
/// `q`-quantile (nearest rank).
pub fn percentile_cap(raw_values: &[f64], q: f64) -> Result<f64> {
    if raw_values.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("quantile must lie in [0, 1], got {q}")));
    }
    let mut sorted = raw_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let cap = sorted[rank - 1];
    if cap > 0.0 {
        Ok(cap)
    } else {
        Err(Error::Domain("all sampled uncertainties are zero".into()))
    }
}

/// Threshold-based exponential decay:
/// `1` for `U_q <= u0`, otherwise `exp(-a * (U_q - u0) / (u_hi - u0))` with
/// `U_q` first clamped to `u_cap`.
pub fn uncertainty_weight(u_q: f64, params: &UncertaintyParams) -> f64 {
    let u = u_q.min(params.u_cap);
    if u <= params.u0 {
        return 1.0;
    }
    (-params.decay_rate() * (u - params.u0) / (params.u_hi - params.u0)).exp()
}

/// `w(U_q) * A_i` for every rollout in the group.
pub fn weighted_group_advantage(group: &RolloutGroup, params: &UncertaintyParams, eps: f64) -> Result<Vec<f64>> {
    if !(group.uncertainty.is_finite() && group.uncertainty >= 0.0) {
        return Err(Error::Domain(format!(
            "uncertainty must be non-negative, got {}",
            group.uncertainty
        )));
    }
    let w = uncertainty_weight(group.uncertainty, params);
    Ok(group_advantage(&group.rewards, eps)?
        .into_iter()
        .map(|a| w * a)
        .collect())
}
