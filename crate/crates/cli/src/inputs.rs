//! File readers for the CLI's tabular inputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use stock_engine::market_data::{load_csv, CsvSchema, OhlcvSeries};
use stock_engine::metrics::{BankEntry, EvalInstance};
use stock_engine::{Error, Result};

/// Reads a file, or stdin for `-`.
pub fn read_text(path: &Path) -> Result<String> {
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut text)?;
    } else {
        File::open(path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?
            .read_to_string(&mut text)?;
    }
    Ok(text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Every `*.csv` in `dir`, keyed by file stem.
pub fn load_dir(dir: &Path, schema: &CsvSchema) -> Result<BTreeMap<String, OhlcvSeries>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_csv = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            let series = load_csv(&path, schema)?;
            out.insert(series.ticker().to_string(), series);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no csv files in {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct PathRow {
    id: String,
    h: usize,
    close: f64,
    #[serde(default)]
    volume: Option<f64>,
}

#[derive(Default)]
struct PathRows {
    closes: BTreeMap<usize, f64>,
    volumes: BTreeMap<usize, f64>,
}

fn read_paths(path: &Path) -> Result<BTreeMap<String, PathRows>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let mut out: BTreeMap<String, PathRows> = BTreeMap::new();
    for row in rdr.deserialize::<PathRow>() {
        let row = row.map_err(csv_error)?;
        let entry = out.entry(row.id.clone()).or_default();
        if entry.closes.insert(row.h, row.close).is_some() {
            return Err(Error::Validation(format!(
                "duplicate step {} for instance {}",
                row.h, row.id
            )));
        }
        if let Some(v) = row.volume {
            entry.volumes.insert(row.h, v);
        }
    }
    Ok(out)
}

fn steps(id: &str, rows: &BTreeMap<usize, f64>, first: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = rows.range(first..).map(|(_, v)| *v).collect();
    let contiguous = rows.range(first..).enumerate().all(|(i, (h, _))| *h == first + i);
    if values.is_empty() || !contiguous {
        return Err(Error::Validation(format!(
            "instance {id} needs contiguous steps starting at {first}"
        )));
    }
    Ok(values)
}

/// Long-format CSVs with columns `id,h,close[,volume]`. The truth file also
/// carries the last observed bar of each instance at `h = 0`.
pub fn load_eval_instances(pred: &Path, truth: &Path) -> Result<Vec<EvalInstance>> {
    let preds = read_paths(pred)?;
    let truths = read_paths(truth)?;
    let mut out = Vec::with_capacity(truths.len());
    for (id, t) in &truths {
        let p = preds
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no prediction for instance {id}")))?;
        let anchor_close = *t
            .closes
            .get(&0)
            .ok_or_else(|| Error::Validation(format!("instance {id} lacks its h=0 anchor row")))?;
        let closes = steps(id, &t.closes, 1)?;
        let predicted_closes = steps(id, &p.closes, 1)?;
        let (volumes, predicted_volumes) = if t.volumes.is_empty() || p.volumes.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (steps(id, &t.volumes, 1)?, steps(id, &p.volumes, 1)?)
        };
        out.push(EvalInstance {
            anchor_close,
            closes,
            predicted_closes,
            volumes,
            predicted_volumes,
        });
    }
    if let Some(extra) = preds.keys().find(|k| !truths.contains_key(*k)) {
        return Err(Error::Validation(format!("prediction for unknown instance {extra}")));
    }
    Ok(out)
}

/// Numeric CSV with a header; returns the header and rows.
fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("not a number: `{s}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((headers, rows))
}

/// Feature rows and, when present, their target values.
pub type LabeledRows = (Vec<Vec<f64>>, Option<Vec<f64>>);

pub const TARGET_COLUMN: &str = "future_return";

/// Splits rows into features and the optional `future_return` column.
fn split_target(path: &Path) -> Result<LabeledRows> {
    let (headers, rows) = read_matrix(path)?;
    match headers.iter().position(|h| h == TARGET_COLUMN) {
        Some(t) => {
            let targets = rows.iter().map(|r| r[t]).collect();
            let features = rows
                .into_iter()
                .map(|mut r| {
                    r.remove(t);
                    r
                })
                .collect();
            Ok((features, Some(targets)))
        }
        None => Ok((rows, None)),
    }
}

pub fn load_bank(path: &Path) -> Result<Vec<BankEntry>> {
    let (features, targets) = split_target(path)?;
    let targets = targets.ok_or_else(|| Error::MissingField(TARGET_COLUMN.into()))?;
    Ok(features
        .into_iter()
        .zip(targets)
        .map(|(features, future_return)| BankEntry {
            features,
            future_return,
        })
        .collect())
}

/// Query features plus realized outcomes when the file has them.
pub fn load_queries(path: &Path) -> Result<LabeledRows> {
    split_target(path)
}
