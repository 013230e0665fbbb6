//! Standardized backtest: any forecaster's close forecast becomes a z-score
//! signal (predicted cumulative return over horizon-scaled trailing
//! volatility); crossing the threshold opens a fixed-fraction long or short
//! position held for a fixed number of bars.
//!
//! Trades are generated per ticker, then replayed in date order against one
//! shared equity pool with daily mark-to-market. Zero costs, no overlapping
//! positions within a ticker.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::action::{BinningConfig, ForecastAction};
use crate::decoder::{generate_from_action, random_walk_forecaster, GeneratorConfig, TrajectoryForecast};
use crate::error::{Error, Result};
use crate::market_data::{OhlcvBar, OhlcvSeries};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub z_threshold: f64,
    pub vol_window: usize,
    pub capital_fraction: f64,
    pub holding_horizon: usize,
    pub forecast_horizon: usize,
    pub lookback: usize,
    /// Periods per year; Sharpe scales by its square root.
    pub annualization_factor: f64,
    pub risk_free_rate: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            z_threshold: 1.0,
            vol_window: 20,
            capital_fraction: 0.10,
            holding_horizon: 10,
            forecast_horizon: 10,
            lookback: 90,
            annualization_factor: 252.0,
            risk_free_rate: 0.0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_threshold > 0.0) {
            return Err(Error::Config("z_threshold must be positive".into()));
        }
        if !(self.capital_fraction > 0.0 && self.capital_fraction <= 1.0) {
            return Err(Error::Config("capital_fraction must lie in (0, 1]".into()));
        }
        if self.vol_window < 2 || self.holding_horizon < 1 || self.forecast_horizon < 1 {
            return Err(Error::Config(
                "vol_window must be at least 2, holding and forecast horizons at least 1".into(),
            ));
        }
        if self.lookback < self.vol_window + 1 {
            return Err(Error::Config(format!(
                "lookback {} must exceed vol_window {}",
                self.lookback, self.vol_window
            )));
        }
        if !(self.annualization_factor > 0.0) {
            return Err(Error::Config("annualization_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Long,
    Short,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Long => 1.0,
            Side::Short => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub ticker: String,
    pub entry_date: NaiveDate,
    pub entry_price: f64,
    pub exit_date: NaiveDate,
    pub exit_price: f64,
    pub side: Side,
    /// Fraction of equity committed at entry.
    pub size: f64,
    /// Side-adjusted price return of the position.
    pub price_return: f64,
    /// Contribution to equity as a fraction of equity at entry (`size * price_return`).
    pub pnl: f64,
    pub bars_held: usize,
}

impl Trade {
    fn new(ticker: &str, entry: &OhlcvBar, exit: &OhlcvBar, side: Side, size: f64, bars_held: usize) -> Self {
        let price_return = side.sign() * (exit.close - entry.close) / entry.close;
        Trade {
            ticker: ticker.to_string(),
            entry_date: entry.date,
            entry_price: entry.close,
            exit_date: exit.date,
            exit_price: exit.close,
            side,
            size,
            price_return,
            pnl: size * price_return,
            bars_held,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityPoint {
    pub date: NaiveDate,
    pub equity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    /// `None` when daily returns have zero variance.
    pub sharpe: Option<f64>,
    /// Percent.
    pub annualized_return: f64,
    /// Percent.
    pub max_drawdown: f64,
    /// `None` without a benchmark or when the benchmark is flat.
    pub beta: Option<f64>,
    pub total_trades: usize,
    /// Percent; `None` when no trades were made.
    pub win_rate: Option<f64>,
    pub skipped_steps: usize,
    pub equity_curve: Vec<EquityPoint>,
    pub trades: Vec<Trade>,
}

/// What a forecaster may know when asked for a forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastContext {
    pub ticker: String,
    /// Date of the last bar in the history; decisions execute at its close.
    pub as_of: NaiveDate,
    pub horizon: usize,
}

pub trait Forecaster {
    fn forecast(&mut self, ctx: &ForecastContext, history: &OhlcvSeries) -> Result<TrajectoryForecast>;
}

impl<F> Forecaster for F
where
    F: FnMut(&ForecastContext, &OhlcvSeries) -> Result<TrajectoryForecast>,
{
    fn forecast(&mut self, ctx: &ForecastContext, history: &OhlcvSeries) -> Result<TrajectoryForecast> {
        self(ctx, history)
    }
}

fn last_close(history: &OhlcvSeries) -> Result<f64> {
    history
        .last()
        .map(|b| b.close)
        .ok_or(Error::InsufficientData { needed: 1, got: 0 })
}

/// Always predicts the last close: never trades.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroForecaster;

impl Forecaster for ZeroForecaster {
    fn forecast(&mut self, ctx: &ForecastContext, history: &OhlcvSeries) -> Result<TrajectoryForecast> {
        Ok(TrajectoryForecast::from_closes(vec![last_close(history)?; ctx.horizon]))
    }
}

/// Looks up the realized future of each ticker after `as_of`.
#[derive(Debug, Clone)]
pub struct OracleForecaster {
    data: BTreeMap<String, OhlcvSeries>,
}

impl OracleForecaster {
    pub fn new(data: BTreeMap<String, OhlcvSeries>) -> Self {
        OracleForecaster { data }
    }
}

impl Forecaster for OracleForecaster {
    fn forecast(&mut self, ctx: &ForecastContext, _history: &OhlcvSeries) -> Result<TrajectoryForecast> {
        let series = self
            .data
            .get(&ctx.ticker)
            .ok_or_else(|| Error::Forecaster(format!("oracle has no data for {}", ctx.ticker)))?;
        let closes: Vec<f64> = series
            .bars()
            .iter()
            .filter(|b| b.date > ctx.as_of)
            .take(ctx.horizon)
            .map(|b| b.close)
            .collect();
        if closes.is_empty() {
            return Err(Error::Forecaster(format!("no bars after {}", ctx.as_of)));
        }
        Ok(TrajectoryForecast::from_closes(closes))
    }
}

/// Mirrors another forecaster's predicted returns around the last close.
pub struct SignFlipped<F>(pub F);

impl<F: Forecaster> Forecaster for SignFlipped<F> {
    fn forecast(&mut self, ctx: &ForecastContext, history: &OhlcvSeries) -> Result<TrajectoryForecast> {
        let last = last_close(history)?;
        let mut f = self.0.forecast(ctx, history)?;
        for c in &mut f.closes {
            *c = (2.0 * last - *c).max(last * 1e-6);
        }
        Ok(f)
    }
}

/// Seeded random-walk baseline; every call draws from a fresh seed.
#[derive(Debug, Clone)]
pub struct RandomWalkForecaster {
    seed: u64,
    calls: u64,
}

impl RandomWalkForecaster {
    pub fn new(seed: u64) -> Self {
        RandomWalkForecaster { seed, calls: 0 }
    }
}

impl Forecaster for RandomWalkForecaster {
    fn forecast(&mut self, ctx: &ForecastContext, history: &OhlcvSeries) -> Result<TrajectoryForecast> {
        self.calls += 1;
        random_walk_forecaster(history, ctx.horizon, self.seed.wrapping_add(self.calls))
    }
}

/// Realizes a fixed action at every step, rescaled to the current last close.
#[derive(Debug, Clone)]
pub struct BridgeForecaster {
    action: ForecastAction,
    seed: u64,
    binning: BinningConfig,
    generator: GeneratorConfig,
}

impl BridgeForecaster {
    pub fn new(action: ForecastAction, seed: u64, binning: BinningConfig) -> Self {
        BridgeForecaster {
            action,
            seed,
            binning,
            generator: GeneratorConfig::default(),
        }
    }
}

impl Forecaster for BridgeForecaster {
    fn forecast(&mut self, ctx: &ForecastContext, history: &OhlcvSeries) -> Result<TrajectoryForecast> {
        let k = last_close(history)? / self.action.start_value;
        let mut a = self.action.clone();
        a.start_value *= k;
        a.end_value *= k;
        a.max_value *= k;
        a.min_value *= k;
        a.mean_close *= k;
        let seed = self.seed ^ (ctx.as_of.num_days_from_ce() as u64);
        generate_from_action(&a, ctx.horizon, seed, 1.0, &self.binning, &self.generator)
    }
}

/// One line sent to an external forecasting process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastRequest {
    pub ticker: String,
    pub as_of: NaiveDate,
    pub horizon: usize,
    pub history: Vec<OhlcvBar>,
}

/// Speaks JSON lines with a child process: one [`ForecastRequest`] per line
/// in, one [`TrajectoryForecast`] per line out.
pub struct PipeForecaster {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl PipeForecaster {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(PipeForecaster { child, stdin, stdout })
    }
}

impl Forecaster for PipeForecaster {
    fn forecast(&mut self, ctx: &ForecastContext, history: &OhlcvSeries) -> Result<TrajectoryForecast> {
        let req = ForecastRequest {
            ticker: ctx.ticker.clone(),
            as_of: ctx.as_of,
            horizon: ctx.horizon,
            history: history.bars().to_vec(),
        };
        serde_json::to_writer(&mut self.stdin, &req)?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(Error::Forecaster("forecasting process closed its output".into()));
        }
        let f: TrajectoryForecast = serde_json::from_str(line.trim())?;
        f.validate()?;
        Ok(f)
    }
}

impl Drop for PipeForecaster {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub z: f64,
    pub predicted_return: f64,
    /// Trailing volatility was zero; `z` is forced to 0.
    pub degenerate: bool,
}

/// Predicted cumulative return over the forecast horizon divided by trailing
/// daily log-return volatility scaled by `sqrt(horizon)`.
pub fn signal(forecast: &TrajectoryForecast, history: &OhlcvSeries, config: &BacktestConfig) -> Result<Signal> {
    let needed = config.vol_window + 1;
    if history.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: history.len(),
        });
    }
    let horizon = forecast.horizon();
    let last_forecast = *forecast
        .closes
        .last()
        .ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let closes = history.closes();
    let last = closes[closes.len() - 1];
    let predicted_return = last_forecast / last - 1.0;
    let vol = stats::pop_std(&stats::log_returns(&closes[closes.len() - needed..]));
    if vol <= 0.0 {
        return Ok(Signal {
            z: 0.0,
            predicted_return,
            degenerate: true,
        });
    }
    Ok(Signal {
        z: predicted_return / (vol * (horizon as f64).sqrt()),
        predicted_return,
        degenerate: false,
    })
}

/// Walks one ticker and returns its trades plus the number of skipped steps.
fn simulate_ticker(
    series: &OhlcvSeries,
    forecaster: &mut dyn Forecaster,
    config: &BacktestConfig,
) -> (Vec<Trade>, usize) {
    let bars = series.bars();
    let mut trades = Vec::new();
    let mut skipped = 0;
    // `origin` counts observed bars; a position opens at the close of bar origin - 1.
    let mut origin = config.lookback;
    while origin < bars.len() {
        let history = series.slice(origin - config.lookback, origin);
        let entry_idx = origin - 1;
        let ctx = ForecastContext {
            ticker: series.ticker().to_string(),
            as_of: bars[entry_idx].date,
            horizon: config.forecast_horizon,
        };
        let sig = forecaster
            .forecast(&ctx, &history)
            .and_then(|f| signal(&f, &history, config));
        let sig = match sig {
            Ok(s) => s,
            Err(e) => {
                log::warn!("{} {}: step skipped: {e}", ctx.ticker, ctx.as_of);
                skipped += 1;
                origin += 1;
                continue;
            }
        };
        let side = if sig.z > config.z_threshold {
            Side::Long
        } else if sig.z < -config.z_threshold {
            Side::Short
        } else {
            origin += 1;
            continue;
        };
        let exit_idx = (entry_idx + config.holding_horizon).min(bars.len() - 1);
        trades.push(Trade::new(
            series.ticker(),
            &bars[entry_idx],
            &bars[exit_idx],
            side,
            config.capital_fraction,
            exit_idx - entry_idx,
        ));
        origin = exit_idx + 1;
    }
    (trades, skipped)
}

struct OpenPosition {
    trade: usize,
    amount: f64,
    last_price: f64,
}

/// Replays trades against one equity pool starting at 1.0. Each position
/// commits `size * equity` at its entry close and is marked to market daily.
pub fn equity_curve(
    trades: &[Trade],
    prices: &HashMap<String, BTreeMap<NaiveDate, f64>>,
    calendar: &[NaiveDate],
) -> Vec<EquityPoint> {
    let mut by_entry: BTreeMap<NaiveDate, Vec<usize>> = BTreeMap::new();
    for (i, t) in trades.iter().enumerate() {
        by_entry.entry(t.entry_date).or_default().push(i);
    }
    let mut equity = 1.0;
    let mut open: Vec<OpenPosition> = Vec::new();
    let mut curve = Vec::with_capacity(calendar.len());
    for &date in calendar {
        for pos in &mut open {
            let t = &trades[pos.trade];
            if let Some(&price) = prices.get(&t.ticker).and_then(|p| p.get(&date)) {
                equity += pos.amount * t.side.sign() * (price - pos.last_price) / t.entry_price;
                pos.last_price = price;
            }
        }
        open.retain(|pos| trades[pos.trade].exit_date > date);
        for &i in by_entry.get(&date).map(Vec::as_slice).unwrap_or(&[]) {
            open.push(OpenPosition {
                trade: i,
                amount: trades[i].size * equity,
                last_price: trades[i].entry_price,
            });
        }
        curve.push(EquityPoint { date, equity });
    }
    curve
}

pub fn daily_returns(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

/// `mean(r - rf / periods) / std(r) * sqrt(periods)` with the sample std.
pub fn sharpe_ratio(returns: &[f64], risk_free_rate: f64, periods: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = stats::mean(returns);
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Domain("sharpe ratio undefined for zero return variance".into()));
    }
    Ok((mean - risk_free_rate / periods) / var.sqrt() * periods.sqrt())
}

/// Geometric annualized growth, percent.
pub fn annualized_return(equity: &[f64], periods: f64) -> f64 {
    if equity.len() < 2 || equity[0] <= 0.0 {
        return 0.0;
    }
    let growth = equity[equity.len() - 1] / equity[0];
    let years = (equity.len() - 1) as f64 / periods;
    100.0 * (growth.max(0.0).powf(1.0 / years) - 1.0)
}

/// Largest peak-to-trough decline, percent of peak.
pub fn max_drawdown_pct(equity: &[f64]) -> f64 {
    100.0 * crate::action::max_drawdown(equity)
}

/// Least-squares slope of strategy returns on benchmark returns.
pub fn beta(strategy: &[f64], benchmark: &[f64]) -> Result<f64> {
    if strategy.len() != benchmark.len() {
        return Err(Error::Shape(format!(
            "{} strategy returns vs {} benchmark returns",
            strategy.len(),
            benchmark.len()
        )));
    }
    let (ms, mb) = (stats::mean(strategy), stats::mean(benchmark));
    let cov: f64 = strategy.iter().zip(benchmark).map(|(s, b)| (s - ms) * (b - mb)).sum();
    let var: f64 = benchmark.iter().map(|b| (b - mb).powi(2)).sum();
    if var <= 0.0 {
        return Err(Error::Domain("beta undefined for a flat benchmark".into()));
    }
    Ok(cov / var)
}

/// Percent of trades with positive pnl.
pub fn win_rate(trades: &[Trade]) -> Option<f64> {
    if trades.is_empty() {
        return None;
    }
    Some(100.0 * trades.iter().filter(|t| t.pnl > 0.0).count() as f64 / trades.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioMetrics {
    pub sharpe: Option<f64>,
    pub annualized_return: f64,
    pub max_drawdown: f64,
    pub beta: Option<f64>,
    pub total_trades: usize,
    pub win_rate: Option<f64>,
}

pub fn portfolio_metrics(
    equity: &[EquityPoint],
    trades: &[Trade],
    benchmark_returns: Option<&[f64]>,
    config: &BacktestConfig,
) -> PortfolioMetrics {
    let values: Vec<f64> = equity.iter().map(|p| p.equity).collect();
    let returns = daily_returns(&values);
    PortfolioMetrics {
        sharpe: sharpe_ratio(&returns, config.risk_free_rate, config.annualization_factor).ok(),
        annualized_return: annualized_return(&values, config.annualization_factor),
        max_drawdown: max_drawdown_pct(&values),
        beta: benchmark_returns.and_then(|b| beta(&returns, b).ok()),
        total_trades: trades.len(),
        win_rate: win_rate(trades),
    }
}

fn close_map(series: &OhlcvSeries) -> BTreeMap<NaiveDate, f64> {
    series.bars().iter().map(|b| (b.date, b.close)).collect()
}

/// Benchmark closes on `calendar`, carrying the last known close forward.
fn aligned_returns(benchmark: &OhlcvSeries, calendar: &[NaiveDate]) -> Option<Vec<f64>> {
    let closes = close_map(benchmark);
    let mut last = None;
    let mut aligned = Vec::with_capacity(calendar.len());
    for d in calendar {
        if let Some((_, &c)) = closes.range(..=*d).next_back() {
            last = Some(c);
        }
        aligned.push(last?);
    }
    Some(daily_returns(&aligned))
}

pub fn run_backtest(
    data: &BTreeMap<String, OhlcvSeries>,
    forecaster: &mut dyn Forecaster,
    config: &BacktestConfig,
    benchmark: Option<&OhlcvSeries>,
) -> Result<BacktestReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let needed = config.lookback + config.holding_horizon;
    for (ticker, series) in data {
        if series.len() < needed {
            return Err(Error::Validation(format!(
                "{ticker} has {} bars, the backtest needs at least {needed}",
                series.len()
            )));
        }
    }

    let mut trades = Vec::new();
    let mut skipped_steps = 0;
    for series in data.values() {
        let (t, s) = simulate_ticker(series, forecaster, config);
        trades.extend(t);
        skipped_steps += s;
    }
    trades.sort_by(|a, b| (a.entry_date, &a.ticker).cmp(&(b.entry_date, &b.ticker)));

    let first_decision = data
        .values()
        .map(|s| s.bars()[config.lookback - 1].date)
        .min()
        .expect("non-empty");
    let calendar: Vec<NaiveDate> = data
        .values()
        .flat_map(|s| s.bars().iter().map(|b| b.date))
        .filter(|d| *d >= first_decision)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let prices: HashMap<String, BTreeMap<NaiveDate, f64>> =
        data.iter().map(|(t, s)| (t.clone(), close_map(s))).collect();
    let curve = equity_curve(&trades, &prices, &calendar);
    let bench = benchmark.and_then(|b| aligned_returns(b, &calendar));
    let m = portfolio_metrics(&curve, &trades, bench.as_deref(), config);

    Ok(BacktestReport {
        sharpe: m.sharpe,
        annualized_return: m.annualized_return,
        max_drawdown: m.max_drawdown,
        beta: m.beta,
        total_trades: m.total_trades,
        win_rate: m.win_rate,
        skipped_steps,
        equity_curve: curve,
        trades,
    })
}
