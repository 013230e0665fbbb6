//! Quantitative forecasting engine: OHLCV preprocessing, structured forecast
//! actions, multi-component rollout rewards with uncertainty-aware
//! group-relative advantages, distribution-aware losses, forecasting metrics
//! and a standardized backtest.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action;
pub mod backtest;
pub mod config;
pub mod decoder;
pub mod error;
pub mod loss;
pub mod market_data;
pub mod metrics;
pub mod reward;
pub mod rl;
pub mod service;
pub(crate) mod stats;

pub use error::{Error, Result};
