//! Forecast evaluation over a batch of instances: price MAPE and z-normalized
//! RMSE, anchored simple-return RMSE and directional accuracy, realized
//! volatility error, volume errors, plus the kNN return regressor and its
//! Pearson / out-of-sample R² diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const EPS: f64 = 1e-8;
pub const DA_HORIZONS: [usize; 3] = [3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    /// Close on the last observed day.
    pub anchor_close: f64,
    pub closes: Vec<f64>,
    pub predicted_closes: Vec<f64>,
    #[serde(default)]
    pub volumes: Vec<f64>,
    #[serde(default)]
    pub predicted_volumes: Vec<f64>,
}

impl EvalInstance {
    pub fn horizon(&self) -> usize {
        self.closes.len()
    }

    fn validate(&self) -> Result<()> {
        let h = self.closes.len();
        if h == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if self.predicted_closes.len() != h {
            return Err(Error::Shape(format!(
                "{} predicted closes for a horizon of {h}",
                self.predicted_closes.len()
            )));
        }
        if self.volumes.len() != self.predicted_volumes.len() {
            return Err(Error::Shape("volume paths differ in length".into()));
        }
        if !self.volumes.is_empty() && self.volumes.len() != h {
            return Err(Error::Shape(format!(
                "{} volumes for a horizon of {h}",
                self.volumes.len()
            )));
        }
        let positive = std::iter::once(&self.anchor_close)
            .chain(&self.closes)
            .chain(&self.predicted_closes)
            .all(|p| p.is_finite() && *p > 0.0);
        if !positive {
            return Err(Error::Validation("prices must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mape_price: f64,
    pub rmse_price: f64,
    pub mape_vol: Option<f64>,
    pub rmse_vol: Option<f64>,
    pub rmse_return: f64,
    pub da_3: Option<f64>,
    pub da_5: Option<f64>,
    pub da_10: Option<f64>,
    pub mae_rv: f64,
    /// Instances whose true volume path has zero variance.
    pub degenerate_volume_instances: usize,
}

/// Per-instance z-score across the horizon (population std). A constant
/// input maps to all zeros.
pub fn instance_normalize(values: &[f64]) -> Vec<f64> {
    let mean = stats::mean(values);
    let std = stats::pop_std(values);
    if std < EPS {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

fn check_batch(batch: &[EvalInstance]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    batch.iter().try_for_each(EvalInstance::validate)
}

fn rmse(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        sum += (a - b).powi(2);
        n += 1;
    }
    (sum / n.max(1) as f64).sqrt()
}

/// `(MAPE, RMSE)` on closes; RMSE compares z-normalized paths.
pub fn price_metrics(batch: &[EvalInstance]) -> Result<(f64, f64)> {
    check_batch(batch)?;
    let (mut ape, mut n) = (0.0, 0usize);
    for inst in batch {
        for (p, c) in inst.predicted_closes.iter().zip(&inst.closes) {
            ape += ((p - c) / c.max(EPS)).abs();
            n += 1;
        }
    }
    let rmse = rmse(batch.iter().flat_map(|inst| {
        instance_normalize(&inst.predicted_closes)
            .into_iter()
            .zip(instance_normalize(&inst.closes))
    }));
    Ok((ape / n as f64, rmse))
}

fn simple_returns(anchor: f64, path: &[f64]) -> Vec<f64> {
    path.iter().map(|c| c / anchor.max(EPS) - 1.0).collect()
}

/// Return RMSE over all `(n, h)` and directional accuracy at each requested
/// horizon `k` (sign agreement of the step-`k` cumulative return).
pub fn return_metrics(batch: &[EvalInstance], horizons: &[usize]) -> Result<(f64, BTreeMap<usize, f64>)> {
    check_batch(batch)?;
    for &k in horizons {
        if let Some(inst) = batch.iter().find(|i| k == 0 || k > i.horizon()) {
            return Err(Error::OutOfBounds(format!(
                "directional horizon {k} outside 1..={}",
                inst.horizon()
            )));
        }
    }
    let returns: Vec<(Vec<f64>, Vec<f64>)> = batch
        .iter()
        .map(|i| {
            (
                simple_returns(i.anchor_close, &i.predicted_closes),
                simple_returns(i.anchor_close, &i.closes),
            )
        })
        .collect();
    let rmse = rmse(
        returns
            .iter()
            .flat_map(|(p, t)| p.iter().copied().zip(t.iter().copied())),
    );
    let da = horizons
        .iter()
        .map(|&k| {
            let hits = returns
                .iter()
                .filter(|(p, t)| stats::sign(p[k - 1]) == stats::sign(t[k - 1]))
                .count();
            (k, hits as f64 / batch.len() as f64)
        })
        .collect();
    Ok((rmse, da))
}

/// Sum of squared consecutive log-returns, with prices floored at `EPS`.
pub fn realized_vol(closes: &[f64]) -> f64 {
    closes
        .windows(2)
        .map(|w| (w[1].max(EPS).ln() - w[0].max(EPS).ln()).powi(2))
        .sum()
}

pub fn rv_mae(batch: &[EvalInstance]) -> Result<f64> {
    check_batch(batch)?;
    Ok(batch
        .iter()
        .map(|i| (realized_vol(&i.predicted_closes) - realized_vol(&i.closes)).abs())
        .sum::<f64>()
        / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub mape: f64,
    pub rmse: f64,
    pub degenerate_instances: usize,
}

/// MAPE and RMSE between z-normalized volume paths. The MAPE denominator is
/// `max(|z(v)|, EPS)`; instances with constant true volume are counted as
/// degenerate.
pub fn volume_metrics(batch: &[EvalInstance]) -> Result<VolumeMetrics> {
    check_batch(batch)?;
    if batch.iter().any(|i| i.volumes.is_empty()) {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (mut ape, mut sq, mut n, mut degenerate) = (0.0, 0.0, 0usize, 0usize);
    for inst in batch {
        if stats::pop_std(&inst.volumes) < EPS {
            degenerate += 1;
        }
        let zt = instance_normalize(&inst.volumes);
        let zp = instance_normalize(&inst.predicted_volumes);
        for (p, t) in zp.iter().zip(&zt) {
            ape += ((p - t) / t.abs().max(EPS)).abs();
            sq += (p - t).powi(2);
            n += 1;
        }
    }
    Ok(VolumeMetrics {
        mape: ape / n as f64,
        rmse: (sq / n as f64).sqrt(),
        degenerate_instances: degenerate,
    })
}

/// All metrics for a batch. Directional accuracy is reported for the
/// standard horizons that fit the batch; volume metrics only when every
/// instance carries volumes.
pub fn evaluate(batch: &[EvalInstance]) -> Result<MetricsReport> {
    check_batch(batch)?;
    let (mape_price, rmse_price) = price_metrics(batch)?;
    let min_h = batch.iter().map(EvalInstance::horizon).min().unwrap_or(0);
    let ks: Vec<usize> = DA_HORIZONS.iter().copied().filter(|k| *k <= min_h).collect();
    let (rmse_return, da) = return_metrics(batch, &ks)?;
    let vol = if batch.iter().all(|i| !i.volumes.is_empty()) {
        Some(volume_metrics(batch)?)
    } else {
        None
    };
    Ok(MetricsReport {
        mape_price,
        rmse_price,
        mape_vol: vol.map(|v| v.mape),
        rmse_vol: vol.map(|v| v.rmse),
        rmse_return,
        da_3: da.get(&3).copied(),
        da_5: da.get(&5).copied(),
        da_10: da.get(&10).copied(),
        mae_rv: rv_mae(batch)?,
        degenerate_volume_instances: vol.map_or(0, |v| v.degenerate_instances),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub features: Vec<f64>,
    /// Future cumulative return observed after this state.
    pub future_return: f64,
}

/// Mean future return of the `k` nearest bank entries (Euclidean distance,
/// ties resolved in bank order).
pub fn knn_predict(query: &[f64], bank: &[BankEntry], k: usize) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if k == 0 || k > bank.len() {
        return Err(Error::OutOfBounds(format!("k = {k} with a bank of {}", bank.len())));
    }
    if let Some(e) = bank.iter().find(|e| e.features.len() != query.len()) {
        return Err(Error::Shape(format!(
            "query has {} features, bank entry has {}",
            query.len(),
            e.features.len()
        )));
    }
    let mut dist: Vec<(f64, usize)> = bank
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let d2: f64 = e.features.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum();
            (d2, i)
        })
        .collect();
    // stable: equal distances keep bank order
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(dist[..k].iter().map(|(_, i)| bank[*i].future_return).sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `None` when the predictions are constant.
    pub pearson: Option<f64>,
    pub oos_r2: f64,
}

/// Pearson correlation and out-of-sample R² against a historical-mean benchmark.
pub fn diagnostics(pred: &[f64], truth: &[f64], hist_mean: f64) -> Result<Diagnostics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} outcomes",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: truth.len(),
        });
    }
    if stats::pop_std(truth) == 0.0 {
        return Err(Error::Domain(
            "pearson correlation is undefined for constant outcomes".into(),
        ));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p).powi(2)).sum();
    let sst: f64 = truth.iter().map(|y| (y - hist_mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Domain("outcomes all equal the historical mean".into()));
    }
    Ok(Diagnostics {
        pearson: stats::pearson(pred, truth),
        oos_r2: 1.0 - sse / sst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(anchor: f64, closes: &[f64], pred: &[f64]) -> EvalInstance {
        EvalInstance {
            anchor_close: anchor,
            closes: closes.to_vec(),
            predicted_closes: pred.to_vec(),
            volumes: Vec::new(),
            predicted_volumes: Vec::new(),
        }
    }

    fn path() -> Vec<f64> {
        vec![101.0, 99.0, 103.0, 104.0, 102.0, 105.0, 107.0, 106.0, 108.0, 110.0]
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(instance_normalize(&[5.0; 4]), vec![0.0; 4]);
        assert_eq!(instance_normalize(&[1.0, 3.0]), vec![-1.0, 1.0]);
        let z = instance_normalize(&path());
        assert!(stats::mean(&z).abs() < 1e-12);
        assert!((stats::pop_std(&z) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_price_forecast() {
        let b = vec![inst(100.0, &path(), &path())];
        assert_eq!(price_metrics(&b).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_ratio_mape() {
        let pred: Vec<f64> = path().iter().map(|c| 1.1 * c).collect();
        let (mape, rmse) = price_metrics(&[inst(100.0, &path(), &pred)]).unwrap();
        assert!((mape - 0.1).abs() < 1e-12);
        assert!(rmse < 1e-12);
    }

    #[test]
    fn additive_shift_only_moves_mape() {
        let pred: Vec<f64> = path().iter().map(|c| c + 3.0).collect();
        let (mape, rmse) = price_metrics(&[inst(100.0, &path(), &pred)]).unwrap();
        assert!(mape > 0.0);
        assert!(rmse < 1e-12);
    }

    #[test]
    fn empty_batch_errors() {
        assert!(price_metrics(&[]).is_err());
    }

    #[test]
    fn perfect_returns() {
        let (rmse, da) = return_metrics(&[inst(100.0, &path(), &path())], &DA_HORIZONS).unwrap();
        assert_eq!(rmse, 0.0);
        assert!(da.values().all(|v| *v == 1.0));
    }

    #[test]
    fn flipped_sign_misses() {
        let truth = [101.0, 102.0, 103.0];
        let pred = [99.0, 98.0, 97.0];
        let (_, da) = return_metrics(&[inst(100.0, &truth, &pred)], &[3]).unwrap();
        assert_eq!(da[&3], 0.0);
    }

    #[test]
    fn same_sign_hit() {
        let truth = [100.5, 102.0, 105.0];
        let pred = [100.2, 100.8, 101.0];
        let (_, da) = return_metrics(&[inst(100.0, &truth, &pred)], &[3]).unwrap();
        assert_eq!(da[&3], 1.0);
    }

    #[test]
    fn horizon_beyond_path() {
        assert!(matches!(
            return_metrics(&[inst(100.0, &[1.0, 2.0], &[1.0, 2.0])], &[3]),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn realized_vol_examples() {
        assert_eq!(realized_vol(&[100.0; 5]), 0.0);
        let expected = 1.1f64.ln().powi(2) + (100.0f64 / 110.0).ln().powi(2);
        assert!((realized_vol(&[100.0, 110.0, 100.0]) - expected).abs() < 1e-15);
        assert!((realized_vol(&[100.0, 110.0, 100.0]) - 0.018168).abs() < 1e-5);
        assert_eq!(rv_mae(&[inst(100.0, &path(), &path())]).unwrap(), 0.0);
    }

    #[test]
    fn volume_examples() {
        let mut i = inst(100.0, &path(), &path());
        i.volumes = vec![10.0, 20.0, 15.0, 30.0, 25.0, 12.0, 18.0, 22.0, 11.0, 40.0];
        i.predicted_volumes = i.volumes.clone();
        let v = volume_metrics(std::slice::from_ref(&i)).unwrap();
        assert_eq!((v.mape, v.rmse, v.degenerate_instances), (0.0, 0.0, 0));

        // affine rescale of both series leaves rmse unchanged
        let mut j = i.clone();
        j.predicted_volumes = i.volumes.iter().rev().cloned().collect();
        let base = volume_metrics(std::slice::from_ref(&j)).unwrap().rmse;
        let mut k = j.clone();
        k.volumes = j.volumes.iter().map(|v| 3.0 * v + 7.0).collect();
        k.predicted_volumes = j.predicted_volumes.iter().map(|v| 0.5 * v + 100.0).collect();
        assert!((volume_metrics(&[k]).unwrap().rmse - base).abs() < 1e-12);

        let mut flat = i.clone();
        flat.volumes = vec![1000.0; 10];
        let v = volume_metrics(&[flat]).unwrap();
        assert_eq!(v.degenerate_instances, 1);
        assert!(v.mape.is_finite());
    }

    #[test]
    fn evaluate_reports_standard_horizons() {
        let r = evaluate(&[inst(100.0, &path(), &path())]).unwrap();
        assert_eq!((r.da_3, r.da_5, r.da_10), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(r.mape_vol, None);
        let short = evaluate(&[inst(
            100.0,
            &[101.0, 102.0, 103.0, 104.0],
            &[101.0, 102.0, 103.0, 104.0],
        )])
        .unwrap();
        assert_eq!((short.da_3, short.da_5), (Some(1.0), None));
    }

    fn bank() -> Vec<BankEntry> {
        [(0.0, 0.01), (1.0, -0.01), (10.0, 0.09)]
            .iter()
            .map(|&(x, r)| BankEntry {
                features: vec![x],
                future_return: r,
            })
            .collect()
    }

    #[test]
    fn knn_examples() {
        let b = bank();
        assert_eq!(knn_predict(&[10.0], &b, 1).unwrap(), 0.09);
        assert!((knn_predict(&[3.0], &b, 3).unwrap() - 0.03).abs() < 1e-15);
        assert!(knn_predict(&[0.4], &b, 2).unwrap().abs() < 1e-15);
        assert!(knn_predict(&[0.4], &[], 1).is_err());
        assert!(knn_predict(&[0.4], &b, 4).is_err());
        assert!(knn_predict(&[0.4, 1.0], &b, 1).is_err());
    }

    #[test]
    fn knn_ties_follow_bank_order() {
        let b: Vec<BankEntry> = [(1.0, 0.5), (-1.0, -0.5)]
            .iter()
            .map(|&(x, r)| BankEntry {
                features: vec![x],
                future_return: r,
            })
            .collect();
        assert_eq!(knn_predict(&[0.0], &b, 1).unwrap(), 0.5);
    }

    #[test]
    fn diagnostics_examples() {
        let y = [0.01, -0.02, 0.03, 0.0, 0.015];
        let d = diagnostics(&y, &y, 0.0).unwrap();
        assert!((d.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(d.oos_r2, 1.0);

        let hist = 0.004;
        let d = diagnostics(&[hist; 5], &y, hist).unwrap();
        assert_eq!(d.oos_r2, 0.0);
        assert_eq!(d.pearson, None);

        let ybar = stats::mean(&y);
        let mirror: Vec<f64> = y.iter().map(|v| -v + 2.0 * ybar).collect();
        assert!((diagnostics(&mirror, &y, hist).unwrap().pearson.unwrap() + 1.0).abs() < 1e-12);

        assert!(diagnostics(&[1.0, 2.0], &[3.0, 3.0], 0.0).is_err());
    }
}
