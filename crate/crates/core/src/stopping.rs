//! Per-channel patience controller for progressive early stopping.
//!
//! Each channel keeps its own best risk and remaining patience. A channel
//! whose risk fails to strictly improve for `patience` consecutive
//! observations is frozen; training stops once every channel is frozen.
//! The global best step and checkpoint move whenever any active channel
//! improves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NnkError, Result};

/// When the global best step/checkpoint is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestPolicy {
    /// On any single channel's improvement.
    #[default]
    AnyChannel,
    /// When the mean over channels of (this step's risk for active channels,
    /// best risk for frozen ones) strictly improves.
    CombinedRisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub channels: usize,
    pub patience: u32,
    /// Training steps between evaluations.
    pub eval_interval: u64,
    /// Evaluations per LOO computation (1 = every evaluation).
    pub eval_period: u64,
    #[serde(default)]
    pub best_policy: BestPolicy,
}

impl ControllerConfig {
    pub fn new(channels: usize, patience: u32) -> Self {
        ControllerConfig {
            channels,
            patience,
            eval_interval: 1,
            eval_period: 1,
            best_policy: BestPolicy::AnyChannel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.patience == 0 || self.eval_interval == 0 || self.eval_period == 0 {
            return Err(NnkError::Input(format!(
                "controller needs C, p, n, T >= 1 (got C={}, p={}, n={}, T={})",
                self.channels, self.patience, self.eval_interval, self.eval_period
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingState {
    pub patience: u32,
    pub best_policy: BestPolicy,
    /// Remaining patience per channel.
    pub q: Vec<u32>,
    /// Best risk per channel; `None` until the first observation.
    pub r: Vec<Option<f64>>,
    pub t: u64,
    pub t_star: u64,
    pub best_checkpoint: Option<String>,
    /// Best combined risk, tracked only under [`BestPolicy::CombinedRisk`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_combined: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub freeze_now: Vec<u32>,
    pub best_updated: bool,
    pub t_star: u64,
    pub stopped: bool,
}

pub fn controller_new(config: &ControllerConfig) -> Result<StoppingState> {
    config.validate()?;
    Ok(StoppingState {
        patience: config.patience,
        best_policy: config.best_policy,
        q: vec![config.patience; config.channels],
        r: vec![None; config.channels],
        t: 0,
        t_star: 0,
        best_checkpoint: None,
        best_combined: None,
    })
}

fn improves(risk: f64, best: Option<f64>) -> bool {
    best.map_or(true, |b| risk < b)
}

impl StoppingState {
    pub fn channels(&self) -> usize {
        self.q.len()
    }

    pub fn is_frozen(&self, c: usize) -> bool {
        self.q[c] == 0
    }

    pub fn frozen(&self) -> Vec<bool> {
        self.q.iter().map(|&q| q == 0).collect()
    }

    pub fn stopped(&self) -> bool {
        self.q.iter().all(|&q| q == 0)
    }

    /// Unfrozen channels, ascending.
    pub fn active_channels(&self) -> Vec<u32> {
        (0..self.q.len()).filter(|&c| self.q[c] > 0).map(|c| c as u32).collect()
    }

    /// Applies one evaluation. `risks` must cover exactly the active
    /// channels and `t` must exceed every earlier step.
    pub fn observe(&self, t: u64, risks: &BTreeMap<u32, f64>, token: &str) -> Result<(StoppingState, Decision)> {
        if self.stopped() {
            return Err(NnkError::Contract("controller already stopped".into()));
        }
        if t <= self.t {
            return Err(NnkError::Contract(format!("step {t} does not follow step {}", self.t)));
        }
        for (&c, &risk) in risks {
            let c = c as usize;
            if c >= self.q.len() {
                return Err(NnkError::Contract(format!("risk for unknown channel {c}")));
            }
            if self.is_frozen(c) {
                return Err(NnkError::Contract(format!("risk reported for frozen channel {c}")));
            }
            if risk.is_nan() {
                return Err(NnkError::Contract(format!("risk for channel {c} is NaN")));
            }
        }
        if let Some(missing) = self.active_channels().into_iter().find(|c| !risks.contains_key(c)) {
            return Err(NnkError::Contract(format!(
                "no risk reported for active channel {missing}"
            )));
        }

        let mut next = self.clone();
        next.t = t;
        let mut freeze_now = Vec::new();
        let mut best_updated = false;
        for (&c, &risk) in risks {
            let ci = c as usize;
            if improves(risk, next.r[ci]) {
                next.r[ci] = Some(risk);
                next.q[ci] = next.patience;
                if next.best_policy == BestPolicy::AnyChannel {
                    next.t_star = t;
                    next.best_checkpoint = Some(token.to_owned());
                    best_updated = true;
                }
            } else {
                next.q[ci] -= 1;
            }
            if next.q[ci] == 0 {
                freeze_now.push(c);
            }
        }
        if next.best_policy == BestPolicy::CombinedRisk {
            let total: f64 = (0..next.q.len())
                .map(|c| risks.get(&(c as u32)).copied().or(next.r[c]).unwrap_or(f64::INFINITY))
                .sum();
            let combined = total / next.q.len() as f64;
            if improves(combined, next.best_combined) {
                next.best_combined = Some(combined);
                next.t_star = t;
                next.best_checkpoint = Some(token.to_owned());
                best_updated = true;
            }
        }
        let decision = Decision {
            freeze_now,
            best_updated,
            t_star: next.t_star,
            stopped: next.stopped(),
        };
        Ok((next, decision))
    }
}

/// Whether step `t` is an evaluation step: a positive multiple of
/// `eval_interval * eval_period`, and the run has not stopped.
pub fn should_evaluate(state: &StoppingState, t: u64, config: &ControllerConfig) -> bool {
    let every = config.eval_interval.saturating_mul(config.eval_period).max(1);
    t > 0 && t % every == 0 && !state.stopped()
}
