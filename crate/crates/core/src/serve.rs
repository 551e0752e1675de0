//! Request/response service around the stopping controller.
//!
//! Every request is one JSON header line. An `evaluate` request either
//! names a snapshot file (`snapshot_path`) or announces an inline NNKA
//! payload of `snapshot_len` bytes that follows the header line directly.
//!
//! ```text
//! {"type":"evaluate","step":10,"token":"ckpt-10","snapshot_len":4711}\n<4711 bytes>
//! {"type":"evaluate","step":20,"token":"ckpt-20","snapshot_path":"/tmp/s20.nnka"}\n
//! {"type":"status"}\n
//! ```
//!
//! Each request gets exactly one JSON response line, flushed before the
//! next request is read.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::interpolation::{
    loo_risk_all_channels, loo_risk_all_channels_cached, loo_risk_full_layer_with, ChannelLooReport, EvalOptions,
    NeighborhoodCache,
};
use crate::nnk_graph::NnkConfig;
use crate::report::{write_entry, write_header, HistoryEntry, RunHeader, RunHistory, REPORT_SCHEMA};
use crate::snapshot::FeatureSnapshot;
use crate::stopping::{controller_new, should_evaluate, ControllerConfig, StoppingState};
use crate::Result;

/// Inline payloads larger than this are refused.
pub const MAX_SNAPSHOT_BYTES: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub nnk: NnkConfig,
    pub controller: ControllerConfig,
    pub options: EvalOptions,
    /// Track one risk on the concatenated layer instead of one per channel.
    pub full_layer: bool,
    /// Reuse neighborhoods across steps, rebuilding on residual growth.
    pub cache_neighborhoods: bool,
}

impl ServeConfig {
    pub fn new(nnk: NnkConfig, controller: ControllerConfig) -> Self {
        ServeConfig {
            nnk,
            controller,
            options: EvalOptions::default(),
            full_layer: false,
            cache_neighborhoods: false,
        }
    }

    fn header(&self) -> RunHeader {
        RunHeader::new(self.controller.clone(), self.nnk, self.options.clone(), self.full_layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Evaluate {
        step: u64,
        token: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot_len: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot_path: Option<String>,
    },
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub channel: u32,
    pub loo_risk: f64,
    pub mean_neighbors: f64,
    pub mean_same_class_weight: f64,
    pub zero_fraction: f64,
}

impl From<&ChannelLooReport> for ChannelSummary {
    fn from(r: &ChannelLooReport) -> Self {
        ChannelSummary {
            channel: r.channel,
            loo_risk: r.loo_risk,
            mean_neighbors: r.mean_neighbor_count,
            mean_same_class_weight: r.mean_same_class_weight,
            zero_fraction: r.zero_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Decision {
        schema: String,
        step: u64,
        seed: u64,
        freeze_now: Vec<u32>,
        best_updated: bool,
        t_star: u64,
        best_checkpoint: Option<String>,
        stopped: bool,
        channels: Vec<ChannelSummary>,
    },
    Skipped {
        step: u64,
    },
    Status {
        q: Vec<u32>,
        r: Vec<Option<f64>>,
        t: u64,
        t_star: u64,
        best_checkpoint: Option<String>,
        frozen: Vec<bool>,
        active: Vec<u32>,
        stopped: bool,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    RunStopped,
    ProtocolViolation,
    MalformedSnapshot,
    ContractViolation,
    EvaluationFailed,
}

impl Response {
    fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Response::Error {
            code,
            message: message.into(),
        }
    }
}

/// Controller state plus run history for one protocol session.
pub struct Session {
    config: ServeConfig,
    state: StoppingState,
    history: RunHistory,
    cache: NeighborhoodCache,
    evaluations: usize,
}

impl Session {
    pub fn new(config: ServeConfig) -> Result<Self> {
        let mut controller = config.controller.clone();
        if config.full_layer {
            controller.channels = 1;
        }
        config.nnk.validate()?;
        let state = controller_new(&controller)?;
        let history = RunHistory::new(config.header());
        Ok(Session {
            config,
            state,
            history,
            cache: NeighborhoodCache::new(),
            evaluations: 0,
        })
    }

    pub fn state(&self) -> &StoppingState {
        &self.state
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    /// Number of LOO evaluations actually computed.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn status(&self) -> Response {
        let s = &self.state;
        Response::Status {
            q: s.q.clone(),
            r: s.r.clone(),
            t: s.t,
            t_star: s.t_star,
            best_checkpoint: s.best_checkpoint.clone(),
            frozen: s.frozen(),
            active: s.active_channels(),
            stopped: s.stopped(),
        }
    }

    /// Evaluates one snapshot at `step`. Leaves the state untouched on any
    /// error.
    pub fn evaluate(
        &mut self,
        step: u64,
        token: &str,
        snapshot: Option<FeatureSnapshot>,
    ) -> (Response, Option<HistoryEntry>) {
        if self.state.stopped() {
            return (Response::error(ErrorCode::RunStopped, "run-stopped"), None);
        }
        if step <= self.state.t {
            return (
                Response::error(
                    ErrorCode::ContractViolation,
                    format!("step {step} does not follow step {}", self.state.t),
                ),
                None,
            );
        }
        if !should_evaluate(&self.state, step, &self.config.controller) {
            return (Response::Skipped { step }, None);
        }
        let Some(mut snapshot) = snapshot else {
            return (Response::error(ErrorCode::MalformedSnapshot, "missing snapshot"), None);
        };
        if !self.config.full_layer && snapshot.num_channels() != self.state.channels() {
            return (
                Response::error(
                    ErrorCode::MalformedSnapshot,
                    format!(
                        "snapshot has {} channels, controller tracks {}",
                        snapshot.num_channels(),
                        self.state.channels()
                    ),
                ),
                None,
            );
        }
        snapshot.step = step;

        let started = Instant::now();
        let reports = match self.compute(&snapshot) {
            Ok(r) => r,
            Err(e) => return (Response::error(ErrorCode::EvaluationFailed, e.to_string()), None),
        };
        let risks: BTreeMap<u32, f64> = reports
            .iter()
            .map(|r| (if r.is_full_layer() { 0 } else { r.channel }, r.loo_risk))
            .collect();
        let (next, decision) = match self.state.observe(step, &risks, token) {
            Ok(v) => v,
            Err(e) => return (Response::error(ErrorCode::ContractViolation, e.to_string()), None),
        };
        self.evaluations += 1;
        self.state = next;
        let entry = HistoryEntry {
            schema: REPORT_SCHEMA.into(),
            step,
            token: token.to_owned(),
            seed: self.config.options.seed,
            reports,
            decision: decision.clone(),
            duration_us: started.elapsed().as_micros() as u64,
        };
        self.history.push(entry.clone()).expect("steps checked above");
        let response = Response::Decision {
            schema: REPORT_SCHEMA.into(),
            step,
            seed: self.config.options.seed,
            freeze_now: decision.freeze_now,
            best_updated: decision.best_updated,
            t_star: decision.t_star,
            best_checkpoint: self.state.best_checkpoint.clone(),
            stopped: decision.stopped,
            channels: entry.reports.iter().map(ChannelSummary::from).collect(),
        };
        (response, Some(entry))
    }

    fn compute(&mut self, snapshot: &FeatureSnapshot) -> Result<Vec<ChannelLooReport>> {
        if self.config.full_layer {
            return Ok(vec![loo_risk_full_layer_with(
                snapshot,
                &self.config.nnk,
                &self.config.options,
            )?]);
        }
        let options = EvalOptions {
            channel_subset: Some(self.state.active_channels()),
            ..self.config.options.clone()
        };
        if self.config.cache_neighborhoods {
            loo_risk_all_channels_cached(snapshot, &self.config.nnk, &options, &mut self.cache)
        } else {
            loo_risk_all_channels(snapshot, &self.config.nnk, &options)
        }
    }
}

/// Totals for a finished session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServeOutcome {
    pub requests: usize,
    pub errors: usize,
    pub evaluations: usize,
    pub stopped: bool,
}

fn send<W: Write>(out: &mut W, response: &Response) -> io::Result<()> {
    let line = serde_json::to_string(response).expect("responses serialize");
    writeln!(out, "{line}")?;
    out.flush()
}

enum Payload {
    Snapshot(FeatureSnapshot),
    Bad(String),
}

fn read_payload<R: BufRead>(
    input: &mut R,
    len: Option<u64>,
    path: Option<&str>,
) -> io::Result<std::result::Result<Payload, String>> {
    match (len, path) {
        (Some(_), Some(_)) => Ok(Err("give either snapshot_len or snapshot_path, not both".into())),
        (None, None) => Ok(Err("evaluate needs snapshot_len or snapshot_path".into())),
        (Some(n), None) => {
            if n > MAX_SNAPSHOT_BYTES {
                return Ok(Err(format!("snapshot_len {n} exceeds limit")));
            }
            let mut buf = Vec::with_capacity(n as usize);
            input.take(n).read_to_end(&mut buf)?;
            if (buf.len() as u64) < n {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "stream ended inside snapshot payload",
                ));
            }
            Ok(Ok(match FeatureSnapshot::from_bytes(&buf) {
                Ok(s) => Payload::Snapshot(s),
                Err(e) => Payload::Bad(e.to_string()),
            }))
        }
        (None, Some(p)) => Ok(Ok(match crate::snapshot::read_snapshot(p) {
            Ok(s) => Payload::Snapshot(s),
            Err(e) => Payload::Bad(format!("{p}: {e}")),
        })),
    }
}

/// Runs the protocol until end of input. History records, when a sink is
/// given, are written before the matching response is sent.
pub fn serve_loop<R: BufRead, W: Write>(
    mut input: R,
    mut output: W,
    config: ServeConfig,
    mut history_out: Option<&mut dyn Write>,
) -> io::Result<ServeOutcome> {
    let mut session = Session::new(config).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    if let Some(h) = history_out.as_deref_mut() {
        write_header(
            &mut *h,
            session.history.header.as_ref().expect("session history has a header"),
        )?;
        h.flush()?;
    }
    let mut outcome = ServeOutcome {
        requests: 0,
        errors: 0,
        evaluations: 0,
        stopped: false,
    };
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        outcome.requests += 1;
        let response = match serde_json::from_str::<Request>(line.trim()) {
            Err(e) => Response::error(ErrorCode::ProtocolViolation, format!("bad request header: {e}")),
            Ok(Request::Status) => session.status(),
            Ok(Request::Evaluate {
                step,
                token,
                snapshot_len,
                snapshot_path,
            }) => match read_payload(&mut input, snapshot_len, snapshot_path.as_deref())? {
                Err(msg) => Response::error(ErrorCode::ProtocolViolation, msg),
                Ok(payload) => {
                    let (snapshot, bad) = match payload {
                        Payload::Snapshot(s) => (Some(s), None),
                        Payload::Bad(msg) => (None, Some(msg)),
                    };
                    if let (Some(msg), false) = (&bad, session.state.stopped()) {
                        Response::error(ErrorCode::MalformedSnapshot, msg.clone())
                    } else {
                        let (resp, entry) = session.evaluate(step, &token, snapshot);
                        if let (Some(entry), Some(h)) = (entry, history_out.as_deref_mut()) {
                            write_entry(&mut *h, &entry)?;
                        }
                        resp
                    }
                }
            },
        };
        if matches!(response, Response::Error { .. }) {
            outcome.errors += 1;
        }
        send(&mut output, &response)?;
    }
    outcome.evaluations = session.evaluations;
    outcome.stopped = session.state.stopped();
    Ok(outcome)
}
