#![allow(dead_code)]

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stock_engine::market_data::{OhlcvBar, OhlcvSeries};

pub fn day(i: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(i as i64)
}

/// Bars whose open/high/low all equal the close.
pub fn flat_bars(ticker: &str, closes: &[f64]) -> OhlcvSeries {
    let bars = closes
        .iter()
        .enumerate()
        .map(|(i, &c)| OhlcvBar {
            date: day(i),
            open: c,
            high: c,
            low: c,
            close: c,
            volume: 1_000_000.0,
        })
        .collect();
    OhlcvSeries::new(ticker, bars).unwrap()
}

/// Strictly rising closes with alternating step sizes (nonzero volatility).
pub fn monotone_uptrend(n: usize) -> Vec<f64> {
    let mut closes = vec![100.0];
    for i in 1..n {
        let step = if i % 2 == 0 { 1.015 } else { 1.005 };
        closes.push(closes[i - 1] * step);
    }
    closes
}

/// Geometric random walk with random drift and volatility.
pub fn random_path(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let vol = rng.gen_range(0.002..0.04);
    let drift = rng.gen_range(-0.01..0.01);
    let noise = Normal::new(drift, vol).unwrap();
    let mut p = vec![rng.gen_range(10.0..500.0)];
    for _ in 1..len {
        let last = p[p.len() - 1];
        p.push(last * f64::exp(noise.sample(rng)));
    }
    p
}

/// A valid OHLCV series around a random close path.
pub fn random_series(rng: &mut ChaCha8Rng, ticker: &str, len: usize) -> OhlcvSeries {
    let closes = random_path(rng, len);
    let bars = closes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let open = c * rng.gen_range(0.98..1.02);
            let high = c.max(open) * rng.gen_range(1.0..1.03);
            let low = c.min(open) * rng.gen_range(0.97..1.0);
            OhlcvBar {
                date: day(i),
                open,
                high,
                low,
                close: c,
                volume: rng.gen_range(0.0..5e6f64).round(),
            }
        })
        .collect();
    OhlcvSeries::new(ticker, bars).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
