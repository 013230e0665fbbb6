//! OHLCV ingestion, validation, and the log-return transform.
//!
//! Prices are treated as already split/dividend adjusted. Missing trading
//! days are not filled: consecutive bars are consecutive trading sessions.

use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcvBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvBar {
    /// Checks positivity and the high/low envelope.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidBar {
                date: self.date,
                reason,
            })
        };
        for (name, v) in [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return fail(format!("{name} must be a positive finite price, got {v}"));
            }
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return fail(format!("volume must be non-negative, got {}", self.volume));
        }
        if self.low > self.open.min(self.close) {
            return fail(format!(
                "low {} above min(open, close) {}",
                self.low,
                self.open.min(self.close)
            ));
        }
        if self.high < self.open.max(self.close) {
            return fail(format!(
                "high {} below max(open, close) {}",
                self.high,
                self.open.max(self.close)
            ));
        }
        Ok(())
    }
}

/// A validated, strictly date-ordered bar series for one ticker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvSeries {
    ticker: String,
    bars: Vec<OhlcvBar>,
}

impl OhlcvSeries {
    /// Builds a series from bars in any order. Bars are sorted by date and
    /// every invariant is checked.
    pub fn new(ticker: impl Into<String>, mut bars: Vec<OhlcvBar>) -> Result<Self> {
        bars.sort_by_key(|b| b.date);
        for bar in &bars {
            bar.validate()?;
        }
        if let Some(w) = bars.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(Error::DuplicateDate(w[0].date));
        }
        Ok(OhlcvSeries {
            ticker: ticker.into(),
            bars,
        })
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn bars(&self) -> &[OhlcvBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.volume).collect()
    }

    pub fn last(&self) -> Option<&OhlcvBar> {
        self.bars.last()
    }

    /// Contiguous sub-range `[start, end)`; the slice of a valid series is valid.
    pub fn slice(&self, start: usize, end: usize) -> OhlcvSeries {
        OhlcvSeries {
            ticker: self.ticker.clone(),
            bars: self.bars[start..end].to_vec(),
        }
    }
}

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub date: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            date: "date".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
        }
    }
}

impl FromStr for CsvSchema {
    type Err = Error;

    /// Accepts either six positional names (`Date,Open,High,Low,Close,Volume`)
    /// or `key=name` overrides (`date=Date,close=Adj Close`).
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let mut schema = CsvSchema::default();
        if parts.iter().all(|p| !p.contains('=')) {
            if parts.len() != 6 {
                return Err(Error::Config(format!(
                    "csv schema needs 6 column names (date,open,high,low,close,volume), got {}",
                    parts.len()
                )));
            }
            schema.date = parts[0].into();
            schema.open = parts[1].into();
            schema.high = parts[2].into();
            schema.low = parts[3].into();
            schema.close = parts[4].into();
            schema.volume = parts[5].into();
            return Ok(schema);
        }
        for part in parts {
            let (key, name) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=name, got `{part}`")))?;
            let slot = match key.trim() {
                "date" => &mut schema.date,
                "open" => &mut schema.open,
                "high" => &mut schema.high,
                "low" => &mut schema.low,
                "close" => &mut schema.close,
                "volume" => &mut schema.volume,
                other => return Err(Error::Config(format!("unknown csv column key `{other}`"))),
            };
            *slot = name.trim().to_string();
        }
        Ok(schema)
    }
}

/// Reads a CSV file; the ticker is taken from the file stem.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<OhlcvSeries> {
    let path = path.as_ref();
    let ticker = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = std::fs::File::open(path)?;
    read_csv(file, ticker, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, ticker: impl Into<String>, schema: &CsvSchema) -> Result<OhlcvSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let idx = [
        column(&schema.date)?,
        column(&schema.open)?,
        column(&schema.high)?,
        column(&schema.low)?,
        column(&schema.close)?,
        column(&schema.volume)?,
    ];

    let mut bars = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(idx[i]).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date `{}`: {e}", field(0)),
        })?;
        let num = |i: usize, name: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad {name} `{}`", field(i)),
            })
        };
        bars.push(OhlcvBar {
            date,
            open: num(1, "open")?,
            high: num(2, "high")?,
            low: num(3, "low")?,
            close: num(4, "close")?,
            volume: num(5, "volume")?,
        });
    }
    OhlcvSeries::new(ticker, bars)
}

/// One day of log-returns, each anchored to the previous close (prices) or
/// previous volume (with a +1 guard).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl ReturnBar {
    pub fn as_array(&self) -> [f64; 5] {
        [self.open, self.high, self.low, self.close, self.volume]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub ticker: String,
    pub anchor_date: NaiveDate,
    pub anchor_close: f64,
    pub anchor_volume: f64,
    pub returns: Vec<ReturnBar>,
}

pub fn to_log_returns(series: &OhlcvSeries) -> Result<ReturnSeries> {
    let bars = series.bars();
    if bars.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: bars.len(),
        });
    }
    let returns = bars
        .windows(2)
        .map(|w| {
            let (prev, cur) = (&w[0], &w[1]);
            ReturnBar {
                date: cur.date,
                open: (cur.open / prev.close).ln(),
                high: (cur.high / prev.close).ln(),
                low: (cur.low / prev.close).ln(),
                close: (cur.close / prev.close).ln(),
                volume: ((cur.volume + 1.0) / (prev.volume + 1.0)).ln(),
            }
        })
        .collect();
    Ok(ReturnSeries {
        ticker: series.ticker().to_string(),
        anchor_date: bars[0].date,
        anchor_close: bars[0].close,
        anchor_volume: bars[0].volume,
        returns,
    })
}

/// Inverts [`to_log_returns`]. Reconstructed volumes are rounded to whole
/// shares; the volume chain itself is carried unrounded so rounding error
/// does not accumulate.
pub fn from_log_returns(returns: &ReturnSeries) -> Result<OhlcvSeries> {
    if !(returns.anchor_close.is_finite() && returns.anchor_close > 0.0) {
        return Err(Error::Domain(format!(
            "anchor close must be positive, got {}",
            returns.anchor_close
        )));
    }
    if !(returns.anchor_volume.is_finite() && returns.anchor_volume >= 0.0) {
        return Err(Error::Domain(format!(
            "anchor volume must be non-negative, got {}",
            returns.anchor_volume
        )));
    }
    let mut bars = Vec::with_capacity(returns.returns.len() + 1);
    bars.push(OhlcvBar {
        date: returns.anchor_date,
        open: returns.anchor_close,
        high: returns.anchor_close,
        low: returns.anchor_close,
        close: returns.anchor_close,
        volume: returns.anchor_volume,
    });
    let mut prev_close = returns.anchor_close;
    let mut prev_volume = returns.anchor_volume;
    for r in &returns.returns {
        if r.as_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite return on {}", r.date)));
        }
        let open = prev_close * r.open.exp();
        let close = prev_close * r.close.exp();
        // exp/ln round trips can move an equal high/open pair by one ulp.
        let high = (prev_close * r.high.exp()).max(open).max(close);
        let low = (prev_close * r.low.exp()).min(open).min(close);
        let volume_raw = ((prev_volume + 1.0) * r.volume.exp() - 1.0).max(0.0);
        bars.push(OhlcvBar {
            date: r.date,
            open,
            high,
            low,
            close,
            volume: volume_raw.round(),
        });
        prev_close = close;
        prev_volume = volume_raw;
    }
    OhlcvSeries::new(returns.ticker.clone(), bars)
}

/// Splits a series at forecast origin `t`: `history` is the `lookback` bars
/// before `t` (`[t - lookback, t)`), `future` the `horizon` bars from `t`.
pub fn window(series: &OhlcvSeries, t: usize, lookback: usize, horizon: usize) -> Result<(OhlcvSeries, OhlcvSeries)> {
    if t < lookback || t + horizon > series.len() {
        return Err(Error::OutOfBounds(format!(
            "origin {t} with lookback {lookback} and horizon {horizon} on a series of {} bars",
            series.len()
        )));
    }
    Ok((series.slice(t - lookback, t), series.slice(t, t + horizon)))
}

pub const DEFAULT_LOOKBACK: usize = 90;
pub const DEFAULT_HORIZON: usize = 10;
