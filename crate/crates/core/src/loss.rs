//! Framework-free loss math for the distributional forecasting head:
//! Gaussian NLL on open/close/volume log-returns, pinball loss on the high and
//! low quantiles, central-difference gradient checks, and the token layout
//! matrices (causal mask, intra/inter bias indicator, timestamp positions) of
//! a time-major flattened multichannel sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::ReturnBar;

pub const TAU_HIGH: f64 = 0.95;
pub const TAU_LOW: f64 = 0.05;

/// `(r - mu)^2 / (2 var) + ln(var) / 2`.
pub fn gaussian_nll_term(r: f64, mu: f64, var: f64) -> Result<f64> {
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Domain(format!("variance must be positive, got {var}")));
    }
    Ok((r - mu).powi(2) / (2.0 * var) + 0.5 * var.ln())
}

/// Partial derivatives of [`gaussian_nll_term`] with respect to `mu` and `var`.
pub fn gaussian_nll_grad(r: f64, mu: f64, var: f64) -> Result<(f64, f64)> {
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Domain(format!("variance must be positive, got {var}")));
    }
    let resid = r - mu;
    Ok((-resid / var, -resid * resid / (2.0 * var * var) + 0.5 / var))
}

/// `rho_tau(u) = u * (tau - 1{u < 0})`.
pub fn pinball(u: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(if u >= 0.0 { u * tau } else { u * (tau - 1.0) })
}

/// `d/dq rho_tau(r - q)`; undefined at the kink `r = q`.
pub fn pinball_grad_q(r: f64, q: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let u = r - q;
    if u == 0.0 {
        return Err(Error::Domain("pinball loss is not differentiable at u = 0".into()));
    }
    Ok(if u > 0.0 { -tau } else { 1.0 - tau })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("tau must lie in (0, 1), got {tau}")))
    }
}

/// Distribution forecast for one window. Per step: mean and variance for
/// open, close and volume returns, plus high and low return quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionForecast {
    pub steps: Vec<StepForecast>,
    #[serde(default = "default_tau_high")]
    pub tau_high: f64,
    #[serde(default = "default_tau_low")]
    pub tau_low: f64,
}

fn default_tau_high() -> f64 {
    TAU_HIGH
}

fn default_tau_low() -> f64 {
    TAU_LOW
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepForecast {
    pub open: Gaussian,
    pub close: Gaussian,
    pub volume: Gaussian,
    pub high_quantile: f64,
    pub low_quantile: f64,
}

impl DistributionForecast {
    pub fn new(steps: Vec<StepForecast>) -> Self {
        DistributionForecast {
            steps,
            tau_high: TAU_HIGH,
            tau_low: TAU_LOW,
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Flattened parameters, 8 per step:
    /// `[mu_o, var_o, mu_c, var_c, mu_v, var_v, q_h, q_l]`.
    pub fn to_params(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| {
                [
                    s.open.mean,
                    s.open.var,
                    s.close.mean,
                    s.close.var,
                    s.volume.mean,
                    s.volume.var,
                    s.high_quantile,
                    s.low_quantile,
                ]
            })
            .collect()
    }

    pub fn from_params(params: &[f64], tau_high: f64, tau_low: f64) -> Result<Self> {
        if !params.len().is_multiple_of(PARAMS_PER_STEP) {
            return Err(Error::Shape(format!(
                "parameter count {} is not a multiple of {PARAMS_PER_STEP}",
                params.len()
            )));
        }
        let steps = params
            .chunks(PARAMS_PER_STEP)
            .map(|p| StepForecast {
                open: Gaussian { mean: p[0], var: p[1] },
                close: Gaussian { mean: p[2], var: p[3] },
                volume: Gaussian { mean: p[4], var: p[5] },
                high_quantile: p[6],
                low_quantile: p[7],
            })
            .collect();
        Ok(DistributionForecast {
            steps,
            tau_high,
            tau_low,
        })
    }
}

pub const PARAMS_PER_STEP: usize = 8;

/// Non-negative weights per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            open: 1.0,
            high: 1.0,
            low: 1.0,
            close: 1.0,
            volume: 1.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            open: self.open * k,
            high: self.high * k,
            low: self.low * k,
            close: self.close * k,
            volume: self.volume * k,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.open, self.high, self.low, self.close, self.volume];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Domain(format!("loss weights must be non-negative, got {all:?}")))
        }
    }
}

/// Sum over steps of weighted NLL terms (open, close, volume) plus weighted
/// pinball terms on the high and low quantiles.
pub fn ts_loss(forecast: &DistributionForecast, realized: &[ReturnBar], weights: &LossWeights) -> Result<f64> {
    check_shapes(forecast, realized)?;
    weights.validate()?;
    let mut total = 0.0;
    for (s, r) in forecast.steps.iter().zip(realized) {
        total += weights.open * gaussian_nll_term(r.open, s.open.mean, s.open.var)?
            + weights.close * gaussian_nll_term(r.close, s.close.mean, s.close.var)?
            + weights.volume * gaussian_nll_term(r.volume, s.volume.mean, s.volume.var)?
            + weights.high * pinball(r.high - s.high_quantile, forecast.tau_high)?
            + weights.low * pinball(r.low - s.low_quantile, forecast.tau_low)?;
    }
    Ok(total)
}

/// Analytic gradient of [`ts_loss`] in [`DistributionForecast::to_params`] order.
pub fn ts_loss_grad(
    forecast: &DistributionForecast,
    realized: &[ReturnBar],
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    check_shapes(forecast, realized)?;
    weights.validate()?;
    let mut grad = Vec::with_capacity(forecast.horizon() * PARAMS_PER_STEP);
    for (s, r) in forecast.steps.iter().zip(realized) {
        let (dmo, dvo) = gaussian_nll_grad(r.open, s.open.mean, s.open.var)?;
        let (dmc, dvc) = gaussian_nll_grad(r.close, s.close.mean, s.close.var)?;
        let (dmv, dvv) = gaussian_nll_grad(r.volume, s.volume.mean, s.volume.var)?;
        let dqh = pinball_grad_q(r.high, s.high_quantile, forecast.tau_high)?;
        let dql = pinball_grad_q(r.low, s.low_quantile, forecast.tau_low)?;
        grad.extend([
            weights.open * dmo,
            weights.open * dvo,
            weights.close * dmc,
            weights.close * dvc,
            weights.volume * dmv,
            weights.volume * dvv,
            weights.high * dqh,
            weights.low * dql,
        ]);
    }
    Ok(grad)
}

fn check_shapes(forecast: &DistributionForecast, realized: &[ReturnBar]) -> Result<()> {
    if forecast.horizon() == 0 {
        return Err(Error::Shape("forecast has no steps".into()));
    }
    if forecast.horizon() != realized.len() {
        return Err(Error::Shape(format!(
            "forecast has {} steps, realized has {}",
            forecast.horizon(),
            realized.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter indices skipped because they sit next to a kink.
    pub skipped: Vec<usize>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `params`.
/// Indices listed in `skip` are not perturbed.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], step: f64, skip: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut x = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for i in 0..params.len() {
        if skip.contains(&i) {
            continue;
        }
        x[i] = params[i] + step;
        let up = f(&x)?;
        x[i] = params[i] - step;
        let down = f(&x)?;
        x[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        max_rel_error = max_rel_error.max(relative_error(analytic[i], numeric));
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked,
        skipped: skip.to_vec(),
    })
}

/// Gradient check of [`ts_loss`] over every forecast parameter. Quantile
/// parameters within `10 * step` of the pinball kink are skipped.
pub fn ts_loss_grad_check(
    forecast: &DistributionForecast,
    realized: &[ReturnBar],
    weights: &LossWeights,
    step: f64,
) -> Result<GradCheckReport> {
    check_shapes(forecast, realized)?;
    let mut skip = Vec::new();
    for (k, (s, r)) in forecast.steps.iter().zip(realized).enumerate() {
        if (r.high - s.high_quantile).abs() <= 10.0 * step {
            skip.push(k * PARAMS_PER_STEP + 6);
        }
        if (r.low - s.low_quantile).abs() <= 10.0 * step {
            skip.push(k * PARAMS_PER_STEP + 7);
        }
    }
    if !skip.is_empty() {
        log::info!(
            "gradient check skipping {} kink-adjacent quantile parameters",
            skip.len()
        );
    }
    // The kink is not differentiable; evaluate the analytic gradient with
    // those quantiles nudged off the kink, they are never compared anyway.
    let mut nudged = forecast.clone();
    for &i in &skip {
        let step_idx = i / PARAMS_PER_STEP;
        if i % PARAMS_PER_STEP == 6 {
            nudged.steps[step_idx].high_quantile = realized[step_idx].high - 1.0;
        } else {
            nudged.steps[step_idx].low_quantile = realized[step_idx].low - 1.0;
        }
    }
    let analytic = ts_loss_grad(&nudged, realized, weights)?;
    let params = forecast.to_params();
    let (tau_h, tau_l) = (forecast.tau_high, forecast.tau_low);
    grad_check(
        |p| ts_loss(&DistributionForecast::from_params(p, tau_h, tau_l)?, realized, weights),
        &params,
        &analytic,
        step,
        &skip,
    )
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Token index of `(timestamp, channel)` under time-major flattening.
pub fn token_index(timestamp: usize, channel: usize, channels: usize) -> usize {
    timestamp * channels + channel
}

fn check_layout(channels: usize, length: usize) -> Result<()> {
    if channels < 1 || length < 1 {
        return Err(Error::Domain(format!(
            "channels and length must be at least 1, got {channels} x {length}"
        )));
    }
    Ok(())
}

/// `(C*L) x (C*L)` additive mask: `0` where the key timestamp is not after
/// the query timestamp, `-inf` otherwise, regardless of channel.
pub fn causal_block_mask(channels: usize, length: usize) -> Result<Matrix<f64>> {
    check_layout(channels, length)?;
    let n = channels * length;
    let mut data = Vec::with_capacity(n * n);
    for q in 0..n {
        let tq = q / channels;
        for k in 0..n {
            data.push(if k / channels <= tq { 0.0 } else { f64::NEG_INFINITY });
        }
    }
    Ok(Matrix { rows: n, cols: n, data })
}

/// `(C*L) x (C*L)` indicator: `true` for same-channel (intra) pairs, which
/// receive `b_intra`; `false` pairs receive `b_inter`.
pub fn attention_bias_layout(channels: usize, length: usize) -> Result<Matrix<bool>> {
    check_layout(channels, length)?;
    let n = channels * length;
    let mut data = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            data.push(q % channels == k % channels);
        }
    }
    Ok(Matrix { rows: n, cols: n, data })
}

/// Rotary position index per token: its timestamp.
pub fn rope_positions(channels: usize, length: usize) -> Result<Vec<usize>> {
    check_layout(channels, length)?;
    Ok((0..channels * length).map(|i| i / channels).collect())
}
