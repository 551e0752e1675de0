//! Line-delimited JSON records for evaluation history, and replay of a
//! stored history through a fresh controller.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpolation::{ChannelLooReport, EvalOptions};
use crate::nnk_graph::NnkConfig;
use crate::stopping::{controller_new, ControllerConfig, Decision, StoppingState};
use crate::NnkError;

pub const RUN_SCHEMA: &str = "nnk-run/1";
pub const REPORT_SCHEMA: &str = "nnk-report/1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("history steps must increase: {step} after {previous}")]
    NonMonotone { step: u64, previous: u64 },
    #[error(transparent)]
    Controller(#[from] NnkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// First record of a history log: everything needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema: String,
    pub controller: ControllerConfig,
    pub nnk: NnkConfig,
    pub options: EvalOptions,
    pub full_layer: bool,
}

impl RunHeader {
    pub fn new(controller: ControllerConfig, nnk: NnkConfig, options: EvalOptions, full_layer: bool) -> Self {
        RunHeader {
            schema: RUN_SCHEMA.into(),
            controller,
            nnk,
            options,
            full_layer,
        }
    }
}

/// One evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub schema: String,
    pub step: u64,
    pub token: String,
    /// Subsampling seed in effect.
    pub seed: u64,
    pub reports: Vec<ChannelLooReport>,
    pub decision: Decision,
    pub duration_us: u64,
}

impl HistoryEntry {
    /// Risks keyed the way the controller sees them. A full-layer report is
    /// keyed as channel 0 of a one-channel controller.
    pub fn risks(&self) -> BTreeMap<u32, f64> {
        self.reports
            .iter()
            .map(|r| (if r.is_full_layer() { 0 } else { r.channel }, r.loo_risk))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Run(RunHeader),
    Evaluation(HistoryEntry),
}

/// Serializes an entry as a single JSON line (no trailing newline).
pub fn write_report(entry: &HistoryEntry) -> String {
    serde_json::to_string(&Record::Evaluation(entry.clone())).expect("history entries serialize")
}

pub fn parse_report(line: &str) -> Result<HistoryEntry, ReportError> {
    match serde_json::from_str::<Record>(line) {
        Ok(Record::Evaluation(e)) => check_schema(&e.schema, REPORT_SCHEMA, 1).map(|_| e),
        Ok(Record::Run(_)) => Err(ReportError::Parse {
            line: 1,
            reason: "expected an evaluation record".into(),
        }),
        Err(e) => Err(ReportError::Parse {
            line: 1,
            reason: e.to_string(),
        }),
    }
}

fn check_schema(found: &str, expected: &str, line: usize) -> Result<(), ReportError> {
    if found != expected {
        return Err(ReportError::Parse {
            line,
            reason: format!("schema {found:?}, expected {expected:?}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub header: Option<RunHeader>,
    pub entries: Vec<HistoryEntry>,
}

impl RunHistory {
    pub fn new(header: RunHeader) -> Self {
        RunHistory {
            header: Some(header),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: HistoryEntry) -> Result<(), ReportError> {
        if let Some(last) = self.entries.last() {
            if entry.step <= last.step {
                return Err(ReportError::NonMonotone {
                    step: entry.step,
                    previous: last.step,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        if let Some(h) = &self.header {
            write_header(&mut w, h)?;
        }
        for e in &self.entries {
            writeln!(w, "{}", write_report(e))?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ReportError> {
        let mut history = RunHistory::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| ReportError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            match record {
                Record::Run(h) => {
                    check_schema(&h.schema, RUN_SCHEMA, i + 1)?;
                    if history.header.is_some() || !history.entries.is_empty() {
                        return Err(ReportError::Parse {
                            line: i + 1,
                            reason: "run header must come first".into(),
                        });
                    }
                    history.header = Some(h);
                }
                Record::Evaluation(e) => {
                    check_schema(&e.schema, REPORT_SCHEMA, i + 1)?;
                    history.push(e)?;
                }
            }
        }
        Ok(history)
    }
}

pub fn write_header<W: Write>(mut w: W, header: &RunHeader) -> std::io::Result<()> {
    let line = serde_json::to_string(&Record::Run(header.clone())).expect("headers serialize");
    writeln!(w, "{line}")
}

pub fn write_entry<W: Write>(mut w: W, entry: &HistoryEntry) -> std::io::Result<()> {
    writeln!(w, "{}", write_report(entry))?;
    w.flush()
}

/// First step where a replayed decision differs from the recorded one.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub step: u64,
    pub recorded: Decision,
    pub replayed: Decision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub steps: usize,
    pub final_state: StoppingState,
    pub mismatch: Option<ReplayMismatch>,
}

/// Feeds the recorded risks through a fresh controller and compares each
/// decision with the recorded one.
pub fn replay(history: &RunHistory) -> Result<ReplayOutcome, ReportError> {
    let header = history.header.as_ref().ok_or_else(|| ReportError::Parse {
        line: 1,
        reason: "history has no run header".into(),
    })?;
    let mut controller = header.controller.clone();
    if header.full_layer {
        controller.channels = 1;
    }
    let mut state = controller_new(&controller)?;
    for (i, entry) in history.entries.iter().enumerate() {
        let (next, decision) = state.observe(entry.step, &entry.risks(), &entry.token)?;
        state = next;
        if decision != entry.decision {
            return Ok(ReplayOutcome {
                steps: i + 1,
                final_state: state,
                mismatch: Some(ReplayMismatch {
                    step: entry.step,
                    recorded: entry.decision.clone(),
                    replayed: decision,
                }),
            });
        }
    }
    Ok(ReplayOutcome {
        steps: history.entries.len(),
        final_state: state,
        mismatch: None,
    })
}
