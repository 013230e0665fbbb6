use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_stock-engine");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("STOCK_ENGINE_CONFIG")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn write_ohlcv(path: &Path, closes: &[f64]) {
    let mut f = std::fs::File::create(path).unwrap();
    writeln!(f, "date,open,high,low,close,volume").unwrap();
    let d0 = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
    for (i, c) in closes.iter().enumerate() {
        let d = d0 + chrono::Duration::days(i as i64);
        writeln!(f, "{d},{c},{c},{c},{c},1000").unwrap();
    }
}

fn uptrend() -> Vec<f64> {
    (0..10).map(|i| 100.0 + 2.0 * i as f64).collect()
}

#[test]
fn derive_action_replays_uptrend() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("up.csv");
    write_ohlcv(&csv, &uptrend());
    let v = stdout_json(&run(&["derive-action", "--csv", csv.to_str().unwrap()]));
    assert_eq!(v["direction"], json!("up"));
    assert_eq!(v["monotonicity"], json!("increasing"));
    assert_eq!(v["turning_point_count"], json!(0));
    assert_eq!(v["end_change_pct"].as_f64().unwrap(), 18.0);
    assert_eq!(v["peak_timing_bin"], json!("late"));
    assert_eq!(v["trough_timing_bin"], json!("early"));
}

#[test]
fn help_on_every_subcommand() {
    for sub in [
        "derive-action",
        "score",
        "gen-trajectory",
        "metrics",
        "knn",
        "backtest",
        "serve",
    ] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert!(!out.stdout.is_empty());
    }
    assert!(run(&["--help"]).status.success());
}

#[test]
fn missing_flag_is_usage_error() {
    let out = run(&["derive-action"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], json!("usage"));
    assert!(err["error"]["message"].as_str().unwrap().contains("--csv"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("Usage"));
}

#[test]
fn runtime_error_is_json() {
    let out = run(&["derive-action", "--csv", "/nonexistent/x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], json!("io"));
}

#[test]
fn gen_trajectory_then_score() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("up.csv");
    write_ohlcv(&csv, &uptrend());
    let action = run(&["derive-action", "--csv", csv.to_str().unwrap()]);
    let action_path = dir.path().join("action.json");
    std::fs::write(&action_path, &action.stdout).unwrap();

    let traj = stdout_json(&run(&[
        "gen-trajectory",
        "--action",
        action_path.to_str().unwrap(),
        "--seed",
        "3",
    ]));
    let closes = traj["closes"].as_array().unwrap();
    assert_eq!(closes.len(), 10);
    assert_eq!(closes[0].as_f64().unwrap(), 100.0);
    assert_eq!(closes[9].as_f64().unwrap(), 118.0);

    let record = json!({
        "predicted_answer": "up",
        "gold_answer": "up",
        "task_kind": "categorical",
        "action": serde_json::from_slice::<Value>(&action.stdout).unwrap(),
        "forecast": traj,
        "realized": {"closes": uptrend()},
    });
    let record_path = dir.path().join("record.json");
    std::fs::write(&record_path, record.to_string()).unwrap();
    let b = stdout_json(&run(&["score", "--record", record_path.to_str().unwrap()]));
    assert_eq!(b["r_ans"], json!(1.0));
    assert_eq!(b["r_act"], json!(1.0));
    let b2 = stdout_json(&run(&[
        "score",
        "--record",
        record_path.to_str().unwrap(),
        "--beta",
        "0",
    ]));
    assert!(b2["total"].as_f64().unwrap() < b["total"].as_f64().unwrap());
}

#[test]
fn metrics_perfect_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.csv");
    let pred = dir.path().join("pred.csv");
    let mut t = String::from("id,h,close\n");
    let mut p = String::from("id,h,close\n");
    for id in ["a", "b"] {
        t.push_str(&format!("{id},0,100\n"));
        for h in 1..=10 {
            let c = if id == "a" {
                100.0 + h as f64
            } else {
                100.0 - 0.5 * h as f64
            };
            t.push_str(&format!("{id},{h},{c}\n"));
            p.push_str(&format!("{id},{h},{c}\n"));
        }
    }
    std::fs::write(&truth, t).unwrap();
    std::fs::write(&pred, p).unwrap();
    let m = stdout_json(&run(&[
        "metrics",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]));
    assert_eq!(m["mape_price"].as_f64().unwrap(), 0.0);
    assert_eq!(m["da_10"].as_f64().unwrap(), 1.0);
    assert_eq!(m["mape_vol"], Value::Null);
}

#[test]
fn knn_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("bank.csv");
    let queries = dir.path().join("q.csv");
    std::fs::write(&bank, "f1,f2,future_return\n0,0,0.01\n1,1,0.02\n5,5,0.10\n6,6,0.12\n").unwrap();
    std::fs::write(&queries, "f1,f2,future_return\n0.5,0.5,0.015\n5.5,5.5,0.11\n").unwrap();
    let v = stdout_json(&run(&[
        "knn",
        "--bank",
        bank.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--k",
        "2",
    ]));
    let preds: Vec<f64> = v["predictions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!((preds[0] - 0.015).abs() < 1e-12 && (preds[1] - 0.11).abs() < 1e-12);
    assert!((v["diagnostics"]["oos_r2"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn backtest_writes_report_and_equity() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let mut closes = vec![100.0];
    for i in 1..150 {
        let last: f64 = closes[i - 1];
        closes.push(last * if i % 2 == 0 { 1.015 } else { 1.005 });
    }
    write_ohlcv(&data.join("UP.csv"), &closes);
    let out = dir.path().join("report.json");
    let eq = dir.path().join("equity.csv");
    let status = run(&[
        "backtest",
        "--data",
        data.to_str().unwrap(),
        "--forecaster",
        "oracle",
        "--out",
        out.to_str().unwrap(),
        "--equity-csv",
        eq.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["win_rate"], json!(100.0));
    let equity = std::fs::read_to_string(&eq).unwrap();
    assert!(equity.starts_with("date,equity\n"));
    assert_eq!(
        equity.lines().count(),
        report["equity_curve"].as_array().unwrap().len() + 1
    );

    let zero = stdout_json(&run(&[
        "backtest",
        "--data",
        data.to_str().unwrap(),
        "--forecaster",
        "zero",
    ]));
    assert_eq!(zero["total_trades"], json!(0));
    let bad = run(&["backtest", "--data", data.to_str().unwrap(), "--forecaster", "psychic"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn config_file_and_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("engine.toml");
    std::fs::write(&cfg, "[binning]\nflat_threshold_pct = 50.0\n").unwrap();
    let csv = dir.path().join("up.csv");
    write_ohlcv(&csv, &uptrend());
    let v = stdout_json(&run(&[
        "derive-action",
        "--csv",
        csv.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]));
    assert_eq!(v["direction"], json!("flat"));

    let out = Command::new(BIN)
        .args(["derive-action", "--csv", csv.to_str().unwrap()])
        .env("STOCK_ENGINE_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(stdout_json(&out)["direction"], json!("flat"));

    std::fs::write(&cfg, "nonsense = 1\n").unwrap();
    let out = run(&[
        "derive-action",
        "--csv",
        csv.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(stderr_json(&out)["error"]["kind"], json!("config"));
}

#[test]
fn serve_stdio_session() {
    let mut child = Command::new(BIN)
        .args(["serve", "--stdio"])
        .env_remove("STOCK_ENGINE_CONFIG")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let closes = uptrend();
    let action = json!({
        "future_window": "t+1_t+10", "start_value": 100.0, "end_value": 118.0, "max_value": 118.0,
        "min_value": 100.0, "mean_close": 109.0, "direction": "up", "end_change_pct": 18.0,
        "range_pct": 18.0, "volatility_level": "low", "range_width_bin": "wide", "max_drawdown_bin": "low",
        "turning_point_count": 0, "peak_timing_bin": "late", "trough_timing_bin": "early",
        "monotonicity": "increasing", "trendline_fit": "strong", "tail_risk_level": "low"
    });
    let req = |id: u32, pred: &str| {
        json!({"id": id, "group_id": "g", "group_size": 2, "predicted_answer": pred, "gold_answer": "up",
               "task_kind": "categorical", "action": action, "forecast_closes": closes,
               "realized_closes": closes, "u_q": 0.2})
    };
    {
        let stdin = child.stdin.as_mut().unwrap();
        writeln!(stdin, "this is not json").unwrap();
        writeln!(stdin, "{}", req(1, "down")).unwrap();
        writeln!(stdin, "{}", req(2, "up")).unwrap();
    }
    drop(child.stdin.take());
    let out = child.wait_with_output().unwrap();
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], Value::Null);
    assert!(lines[0]["error"].is_object());
    assert!((lines[1]["advantage"].as_f64().unwrap() + 1.0).abs() < 1e-12);
    assert!((lines[2]["advantage"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(lines[2]["weight"], json!(1.0));
}
