//! Streaming reward service: newline-delimited JSON requests in, one JSON
//! response per request out.
//!
//! Ungrouped requests are answered immediately and in order. Requests that
//! share a `group_id` are held until the group's declared size arrives; the
//! whole group is then emitted together with uncertainty-weighted
//! group-relative advantages. Group buffers live in a [`Session`], one per
//! connection, so connections share no mutable state.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::action::{from_json_value, ForecastAction};
use crate::config::EngineConfig;
use crate::decoder::TrajectoryForecast;
use crate::error::{Error, Result};
use crate::reward::{
    answer_reward, forecast_precision, total_reward, Answer, RealizedPath, RewardBreakdown, RewardWeights,
    RolloutRecord, TaskKind,
};
use crate::rl::{uncertainty_aggregate, uncertainty_weight, weighted_group_advantage, RolloutGroup};

/// Per-request overrides of the service's reward weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsOverride {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub answer_tolerance: Option<f64>,
    pub precision_scale: Option<f64>,
}

impl WeightsOverride {
    pub fn apply(&self, base: &RewardWeights) -> RewardWeights {
        RewardWeights {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta.unwrap_or(base.beta),
            gamma: self.gamma.unwrap_or(base.gamma),
            answer_tolerance: self.answer_tolerance.unwrap_or(base.answer_tolerance),
            precision_scale: self.precision_scale.unwrap_or(base.precision_scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    /// Any JSON value except null; echoed verbatim.
    pub id: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    pub predicted_answer: Answer,
    pub gold_answer: Answer,
    pub task_kind: TaskKind,
    /// Raw action object; a malformed action scores zero on both action terms.
    pub action: Value,
    pub forecast_closes: Vec<f64>,
    pub realized_closes: Vec<f64>,
    /// Predicted variance per step, summed into the raw uncertainty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
    /// Normalized uncertainty supplied directly; wins over `variances`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    pub r_ans: f64,
    pub r_act: f64,
    pub r_prec: f64,
    pub r_cons: f64,
    pub total: f64,
    /// Request uncertainty, or the group mean once the group completes.
    pub u_q: f64,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub id: Value,
    pub error: ErrorBody,
}

impl ErrorResponse {
    pub fn new(id: Value, err: &Error) -> Self {
        ErrorResponse {
            id,
            error: ErrorBody {
                kind: err.kind().to_string(),
                message: err.to_string(),
            },
        }
    }
}

/// Reward components for one request, exactly as the library computes them.
pub fn score_components(req: &ScoreRequest, config: &EngineConfig) -> Result<RewardBreakdown> {
    if req.forecast_closes.len() != req.realized_closes.len() {
        return Err(Error::Shape(format!(
            "forecast has {} steps, realized path has {}",
            req.forecast_closes.len(),
            req.realized_closes.len()
        )));
    }
    let weights = req.weights.map_or(config.reward, |w| w.apply(&config.reward));
    weights.validate()?;
    let forecast = TrajectoryForecast::from_closes(req.forecast_closes.clone());
    let realized = RealizedPath {
        closes: req.realized_closes.clone(),
        volumes: None,
    };
    match from_json_value(&req.action) {
        Ok(action) => Ok(total_reward(
            &rollout_record(req, action, forecast, realized),
            &weights,
            &config.binning,
        )),
        Err(e) => {
            // Unparseable action: both action terms fail, the rest still count.
            let mut diagnostics = vec![format!("action: {e}")];
            let mut component = |name: &str, r: Result<f64>| {
                r.unwrap_or_else(|e| {
                    diagnostics.push(format!("{name}: {e}"));
                    0.0
                })
            };
            let r_ans = component(
                "r_ans",
                answer_reward(
                    &req.predicted_answer,
                    &req.gold_answer,
                    req.task_kind,
                    weights.answer_tolerance,
                ),
            );
            let r_prec = component(
                "r_prec",
                forecast_precision(&forecast.closes, &realized.closes, weights.precision_scale),
            );
            let mut out = RewardBreakdown::from_components(r_ans, 0.0, r_prec, 0.0, &weights);
            out.diagnostics = diagnostics;
            Ok(out)
        }
    }
}

fn rollout_record(
    req: &ScoreRequest,
    action: ForecastAction,
    forecast: TrajectoryForecast,
    realized: RealizedPath,
) -> RolloutRecord {
    RolloutRecord {
        predicted_answer: req.predicted_answer.clone(),
        gold_answer: req.gold_answer.clone(),
        task_kind: req.task_kind,
        action,
        forecast,
        realized,
    }
}

/// Normalized uncertainty of one request.
pub fn request_uncertainty(req: &ScoreRequest, config: &EngineConfig) -> Result<f64> {
    if let Some(u) = req.u_q {
        if !(u.is_finite() && u >= 0.0) {
            return Err(Error::Domain(format!("u_q must be non-negative, got {u}")));
        }
        return Ok(u);
    }
    match &req.variances {
        Some(v) => {
            if v.len() != req.forecast_closes.len() {
                return Err(Error::Shape(format!(
                    "{} variances for {} forecast steps",
                    v.len(),
                    req.forecast_closes.len()
                )));
            }
            let per_step: Vec<Vec<f64>> = v.iter().map(|&x| vec![x]).collect();
            Ok(uncertainty_aggregate(&per_step, config.uncertainty_raw_cap)?.normalized)
        }
        None => Ok(0.0),
    }
}

struct PendingGroup {
    size: usize,
    members: Vec<ScoreResponse>,
}

/// Protocol state for one connection.
pub struct Session {
    config: Arc<EngineConfig>,
    seen_ids: HashSet<String>,
    groups: HashMap<String, PendingGroup>,
}

impl Session {
    pub fn new(config: Arc<EngineConfig>) -> Self {
        Session {
            config,
            seen_ids: HashSet::new(),
            groups: HashMap::new(),
        }
    }

    /// Number of requests waiting for their group to complete.
    pub fn pending(&self) -> usize {
        self.groups.values().map(|g| g.members.len()).sum()
    }

    /// Handles one input line and returns the response lines it releases:
    /// none for blank lines and incomplete groups, one for an ungrouped
    /// request or an error, the whole group when it completes.
    pub fn handle_line(&mut self, line: &str) -> Vec<String> {
        if line.trim().is_empty() {
            return Vec::new();
        }
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return vec![error_line(Value::Null, &Error::Json(e))],
        };
        let id = value.get("id").cloned().unwrap_or(Value::Null);
        let req: ScoreRequest = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => return vec![error_line(id, &Error::Json(e))],
        };
        if req.id.is_null() {
            return vec![error_line(Value::Null, &Error::MissingField("id".into()))];
        }
        match self.handle_request(req) {
            Ok(responses) => responses.iter().map(to_line).collect(),
            Err((id, e)) => vec![error_line(id, &e)],
        }
    }

    fn handle_request(&mut self, req: ScoreRequest) -> std::result::Result<Vec<ScoreResponse>, (Value, Error)> {
        let id_key = req.id.to_string();
        if self.seen_ids.contains(&id_key) {
            return Err((req.id, Error::Validation(format!("duplicate id {id_key}"))));
        }
        let fail = |e: Error| (req.id.clone(), e);

        let group_size = match &req.group_id {
            Some(gid) => {
                let size = req.group_size.unwrap_or(self.config.default_group_size);
                if size == 0 {
                    return Err(fail(Error::Validation("group_size must be at least 1".into())));
                }
                if let Some(g) = self.groups.get(gid) {
                    if g.size != size {
                        return Err(fail(Error::Validation(format!(
                            "group {gid} declared size {} earlier, now {size}",
                            g.size
                        ))));
                    }
                }
                Some(size)
            }
            None => None,
        };

        let breakdown = score_components(&req, &self.config).map_err(fail)?;
        let u_q = request_uncertainty(&req, &self.config).map_err(fail)?;
        self.seen_ids.insert(id_key);

        let response = ScoreResponse {
            id: req.id,
            group_id: req.group_id.clone(),
            r_ans: breakdown.r_ans,
            r_act: breakdown.r_act,
            r_prec: breakdown.r_prec,
            r_cons: breakdown.r_cons,
            total: breakdown.total,
            u_q,
            weight: uncertainty_weight(u_q, &self.config.uncertainty),
            advantage: None,
            diagnostics: breakdown.diagnostics,
        };
        let (Some(gid), Some(size)) = (req.group_id, group_size) else {
            return Ok(vec![response]);
        };

        let group = self.groups.entry(gid.clone()).or_insert_with(|| PendingGroup {
            size,
            members: Vec::with_capacity(size),
        });
        group.members.push(response);
        if group.members.len() < group.size {
            return Ok(Vec::new());
        }
        let mut members = self.groups.remove(&gid).expect("group present").members;
        finish_group(&gid, &mut members, &self.config).map_err(|e| (Value::Null, e))?;
        Ok(members)
    }
}

/// Fills in group uncertainty, weight and advantages.
fn finish_group(gid: &str, members: &mut [ScoreResponse], config: &EngineConfig) -> Result<()> {
    let u_q = members.iter().map(|m| m.u_q).sum::<f64>() / members.len() as f64;
    let group = RolloutGroup {
        query_id: gid.to_string(),
        rewards: members.iter().map(|m| m.total).collect(),
        uncertainty: u_q,
    };
    let advantages = weighted_group_advantage(&group, &config.uncertainty, config.advantage_eps)?;
    let weight = uncertainty_weight(u_q, &config.uncertainty);
    for (m, a) in members.iter_mut().zip(advantages) {
        m.u_q = u_q;
        m.weight = weight;
        m.advantage = Some(a);
    }
    Ok(())
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("responses serialize")
}

fn error_line(id: Value, err: &Error) -> String {
    to_line(&ErrorResponse::new(id, err))
}

/// Runs one session over a reader/writer pair until end of input.
pub fn serve_stream<R: BufRead, W: Write>(reader: R, mut writer: W, config: Arc<EngineConfig>) -> io::Result<()> {
    let mut session = Session::new(config);
    for line in reader.lines() {
        let line = line?;
        let out = session.handle_line(&line);
        if out.is_empty() {
            continue;
        }
        for l in out {
            writer.write_all(l.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
    }
    if session.pending() > 0 {
        log::warn!("input closed with {} requests in incomplete groups", session.pending());
    }
    Ok(())
}

pub fn serve_stdio(config: Arc<EngineConfig>) -> io::Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve_stream(stdin.lock(), BufWriter::new(stdout.lock()), config)
}

fn handle_connection(stream: TcpStream, config: Arc<EngineConfig>) -> io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_stream(reader, BufWriter::new(stream), config)
}

/// Accepts connections forever, one thread and one session per connection.
pub fn serve_listener(listener: TcpListener, config: Arc<EngineConfig>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let peer = stream.peer_addr().ok();
        let config = Arc::clone(&config);
        thread::spawn(move || {
            if let Err(e) = handle_connection(stream, config) {
                log::warn!("connection {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

pub fn serve_tcp<A: ToSocketAddrs>(addr: A, config: Arc<EngineConfig>) -> io::Result<()> {
    let listener = TcpListener::bind(addr)?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_listener(listener, config)
}
