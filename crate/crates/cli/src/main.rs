//! `stock-engine`: command-line front door to the forecasting engine.
//!
//! Results go to stdout as JSON. Failures print one JSON object
//! `{"error": {"kind", "message"}}` on stderr and exit 1; usage errors exit 2.

mod inputs;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::NaiveDate;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use stock_engine::action::{derive_action, parse_json, serialize_json, ForecastAction};
use stock_engine::backtest::{
    run_backtest, BridgeForecaster, Forecaster, OracleForecaster, PipeForecaster, RandomWalkForecaster, SignFlipped,
    ZeroForecaster,
};
use stock_engine::config::EngineConfig;
use stock_engine::decoder::generate_from_action;
use stock_engine::market_data::{load_csv, CsvSchema, OhlcvSeries};
use stock_engine::metrics::{diagnostics, evaluate, knn_predict};
use stock_engine::reward::{total_reward, RolloutRecord};
use stock_engine::service::{serve_stdio, serve_tcp, WeightsOverride};
use stock_engine::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "stock-engine",
    version,
    about = "Structured stock forecasting: actions, rewards, metrics, backtests"
)]
struct Cli {
    /// TOML or JSON config file; defaults to $STOCK_ENGINE_CONFIG, then built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derive the structured action summarizing a close path from a CSV.
    DeriveAction(DeriveActionArgs),
    /// Score one rollout record (JSON) and print the reward breakdown.
    Score(ScoreArgs),
    /// Generate a close path realizing a structured action.
    GenTrajectory(GenTrajectoryArgs),
    /// Forecasting metrics from long-format prediction and truth CSVs.
    Metrics(MetricsArgs),
    /// k-nearest-neighbor return predictions from a feature bank.
    Knn(KnnArgs),
    /// Run the standardized z-score backtest over a directory of CSVs.
    Backtest(BacktestArgs),
    /// Serve the JSON-lines reward protocol on stdio or a TCP port.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct CsvArgs {
    /// Column names: six positional names or key=name overrides.
    #[arg(long, value_name = "COLUMNS")]
    csv_schema: Option<String>,
}

impl CsvArgs {
    fn schema(&self) -> Result<CsvSchema> {
        self.csv_schema.as_deref().map_or(Ok(CsvSchema::default()), str::parse)
    }
}

#[derive(Debug, Args)]
struct DeriveActionArgs {
    /// OHLCV CSV whose closes form the path.
    #[arg(long, value_name = "FILE")]
    csv: PathBuf,
    #[command(flatten)]
    csv_args: CsvArgs,
    /// First date of the path (inclusive); defaults to the first bar.
    #[arg(long, value_name = "YYYY-MM-DD")]
    from: Option<NaiveDate>,
    /// Number of bars in the path; defaults to all remaining bars.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Rollout record JSON (`-` for stdin).
    #[arg(long, value_name = "FILE")]
    record: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct GenTrajectoryArgs {
    /// Action JSON (`-` for stdin).
    #[arg(long, value_name = "FILE")]
    action: PathBuf,
    /// Defaults to the action's future window.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Predictions: columns id,h,close[,volume] with h = 1..S.
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Truth: same columns plus the last observed bar at h = 0.
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
}

#[derive(Debug, Args)]
struct KnnArgs {
    /// Feature bank with a `future_return` column.
    #[arg(long, value_name = "FILE")]
    bank: PathBuf,
    /// Query features; a `future_return` column adds diagnostics.
    #[arg(long, value_name = "FILE")]
    queries: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Debug, Args)]
struct BacktestArgs {
    /// Directory of per-ticker OHLCV CSVs (ticker = file stem).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[command(flatten)]
    csv_args: CsvArgs,
    /// oracle | flipped-oracle | zero | random-walk | bridge:ACTION.json | pipe:COMMAND
    #[arg(long, default_value = "random-walk")]
    forecaster: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Benchmark OHLCV CSV for beta.
    #[arg(long, value_name = "FILE")]
    benchmark: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the daily equity curve as date,equity.
    #[arg(long, value_name = "FILE")]
    equity_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ServeArgs {
    /// Serve one session over stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// Listen on this TCP port, one session per connection.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1", requires = "port")]
    host: String,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn derive(args: &DeriveActionArgs, config: &EngineConfig) -> Result<ForecastAction> {
    let series = load_csv(&args.csv, &args.csv_args.schema()?)?;
    let closes: Vec<f64> = series
        .bars()
        .iter()
        .filter(|b| args.from.is_none_or(|d| b.date >= d))
        .take(args.horizon.unwrap_or(usize::MAX))
        .map(|b| b.close)
        .collect();
    if let Some(h) = args.horizon {
        if closes.len() < h {
            return Err(Error::InsufficientData {
                needed: h,
                got: closes.len(),
            });
        }
    }
    derive_action(&closes, &config.binning)
}

fn score(args: &ScoreArgs, config: &EngineConfig) -> Result<()> {
    let record: RolloutRecord = inputs::read_json(&args.record)?;
    let weights = WeightsOverride {
        alpha: args.alpha,
        beta: args.beta,
        gamma: args.gamma,
        ..Default::default()
    }
    .apply(&config.reward);
    weights.validate()?;
    print_json(&total_reward(&record, &weights, &config.binning))
}

fn gen_trajectory(args: &GenTrajectoryArgs, config: &EngineConfig) -> Result<()> {
    let action = parse_json(&inputs::read_text(&args.action)?)?;
    let horizon = args
        .horizon
        .or_else(|| action.horizon())
        .ok_or_else(|| Error::Validation(format!("cannot read a horizon from `{}`", action.future_window)))?;
    let f = generate_from_action(
        &action,
        horizon,
        args.seed,
        args.noise_scale,
        &config.binning,
        &config.generator,
    )?;
    print_json(&f)
}

fn knn(args: &KnnArgs) -> Result<()> {
    let bank = inputs::load_bank(&args.bank)?;
    let (queries, truth) = inputs::load_queries(&args.queries)?;
    let predictions = queries
        .iter()
        .map(|q| knn_predict(q, &bank, args.k))
        .collect::<Result<Vec<f64>>>()?;
    let diag = match truth {
        Some(t) => {
            let hist_mean = bank.iter().map(|e| e.future_return).sum::<f64>() / bank.len() as f64;
            Some(diagnostics(&predictions, &t, hist_mean)?)
        }
        None => None,
    };
    print_json(&json!({ "predictions": predictions, "diagnostics": diag }))
}

fn forecaster(
    args: &BacktestArgs,
    config: &EngineConfig,
    data: &BTreeMap<String, OhlcvSeries>,
) -> Result<Box<dyn Forecaster>> {
    let spec = args.forecaster.as_str();
    if let Some(path) = spec.strip_prefix("bridge:") {
        let action = parse_json(&inputs::read_text(Path::new(path))?)?;
        return Ok(Box::new(BridgeForecaster::new(
            action,
            args.seed,
            config.binning.clone(),
        )));
    }
    if let Some(cmd) = spec.strip_prefix("pipe:") {
        return Ok(Box::new(PipeForecaster::spawn(cmd)?));
    }
    Ok(match spec {
        "oracle" => Box::new(OracleForecaster::new(data.clone())),
        "flipped-oracle" => Box::new(SignFlipped(OracleForecaster::new(data.clone()))),
        "zero" => Box::new(ZeroForecaster),
        "random-walk" => Box::new(RandomWalkForecaster::new(args.seed)),
        other => return Err(Error::Config(format!("unknown forecaster `{other}`"))),
    })
}

fn backtest(args: &BacktestArgs, config: &EngineConfig) -> Result<()> {
    let schema = args.csv_args.schema()?;
    let data = inputs::load_dir(&args.data, &schema)?;
    let benchmark = args.benchmark.as_ref().map(|p| load_csv(p, &schema)).transpose()?;
    let mut f = forecaster(args, config, &data)?;
    let report = run_backtest(&data, f.as_mut(), &config.backtest, benchmark.as_ref())?;

    if let Some(path) = &args.equity_csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
        w.write_record(["date", "equity"])
            .map_err(|e| Error::Config(e.to_string()))?;
        for p in &report.equity_curve {
            w.write_record([p.date.to_string(), p.equity.to_string()])
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush()?;
    }
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path)?;
            serde_json::to_writer_pretty(file, &report)?;
            Ok(())
        }
        None => print_json(&report),
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = EngineConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::DeriveAction(args) => {
            let action = derive(&args, &config)?;
            println!("{}", serialize_json(&action));
            Ok(())
        }
        Command::Score(args) => score(&args, &config),
        Command::GenTrajectory(args) => gen_trajectory(&args, &config),
        Command::Metrics(args) => print_json(&evaluate(&inputs::load_eval_instances(&args.pred, &args.truth)?)?),
        Command::Knn(args) => knn(&args),
        Command::Backtest(args) => backtest(&args, &config),
        Command::Serve(args) => {
            let config = Arc::new(config);
            match args.port {
                Some(port) => serve_tcp((args.host.as_str(), port), config)?,
                None => serve_stdio(config)?,
            }
            Ok(())
        }
    }
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => {
                eprintln!("{}", error_json("usage", e.render().to_string().trim_end()));
                return ExitCode::from(2);
            }
        },
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
