//! Slack allotment, cost-based configuration selection and commit ordering.

mod queues;

pub use queues::{CommitQueue, QueueEntry, SpeculativeQueue};

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{ConfigEntry, ConfigSpec, SequentialPath};
use crate::sim::BackendSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("operation {op} is not on path {path}")]
    NotOnPath { op: String, path: String },
    #[error("no path contains operation {0}")]
    NoPath(String),
    #[error("no profile for operation {0}")]
    MissingProfile(String),
    #[error("operation {0} has no schedulable configuration")]
    NothingSchedulable(String),
    #[error("operation {op} has no configuration on backend {backend}")]
    NoEntriesOnBackend { op: String, backend: String },
    #[error("unknown technique {0:?} (expected fb, dfp, sdb, eslc or pbc)")]
    UnknownTechnique(String),
    #[error("invalid tuning parameter: {0}")]
    InvalidParam(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningParams {
    /// Weight of the penalty for configurations that cannot meet their slack.
    pub alpha: f64,
    /// Commit queue bound per backend; `None` sizes each queue to saturate
    /// its backend with the smallest schedulable request.
    pub cq_capacity: Option<usize>,
    /// Reference invocations per operation before normal selection.
    pub dfp_count: u32,
    pub straggler_factor: f64,
    pub smoothing_beta: f64,
}

impl Default for TuningParams {
    fn default() -> Self {
        TuningParams {
            alpha: 100.0,
            cq_capacity: None,
            dfp_count: 10,
            straggler_factor: 1.5,
            smoothing_beta: 0.5,
        }
    }
}

impl TuningParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ConfigError::InvalidParam(format!("alpha {}", self.alpha)));
        }
        if self.cq_capacity == Some(0) {
            return Err(ConfigError::InvalidParam("cq_capacity 0".into()));
        }
        if !(self.smoothing_beta > 0.0 && self.smoothing_beta <= 1.0) {
            return Err(ConfigError::InvalidParam(format!(
                "smoothing_beta {}",
                self.smoothing_beta
            )));
        }
        if !(self.straggler_factor > 1.0) {
            return Err(ConfigError::InvalidParam(format!(
                "straggler_factor {}",
                self.straggler_factor
            )));
        }
        Ok(())
    }
}

/// Switches for the individual techniques; all on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Techniques {
    /// Feedback: smooth profiled latencies with observed ones.
    pub fb: bool,
    /// Depth-first priority: warm-up reference invocations, deepest first.
    pub dfp: bool,
    /// Safe delayed batching.
    pub sdb: bool,
    /// Early speculation, late commit: re-decide at commit time.
    pub eslc: bool,
    /// Priority-based commit by affinity.
    pub pbc: bool,
}

impl Default for Techniques {
    fn default() -> Self {
        Techniques {
            fb: true,
            dfp: true,
            sdb: true,
            eslc: true,
            pbc: true,
        }
    }
}

impl Techniques {
    /// Disables each technique named in a comma-separated list.
    pub fn ablate(mut self, list: &str) -> Result<Self, ConfigError> {
        for token in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "fb" => self.fb = false,
                "dfp" => self.dfp = false,
                "sdb" => self.sdb = false,
                "eslc" => self.eslc = false,
                "pbc" => self.pbc = false,
                other => return Err(ConfigError::UnknownTechnique(other.to_string())),
            }
        }
        Ok(self)
    }

    pub fn disabled(&self) -> Vec<&'static str> {
        [
            ("fb", self.fb),
            ("dfp", self.dfp),
            ("sdb", self.sdb),
            ("eslc", self.eslc),
            ("pbc", self.pbc),
        ]
        .into_iter()
        .filter(|(_, on)| !on)
        .map(|(n, _)| n)
        .collect()
    }
}

impl FromStr for Techniques {
    type Err = ConfigError;

    /// Parses an ablation list such as `"fb,dfp"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Techniques::default().ablate(s)
    }
}

impl fmt::Display for Techniques {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let off = self.disabled();
        if off.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&off.join(","))
        }
    }
}

/// What the selector needs to know about one backend.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendView {
    pub price_rate: f64,
    /// Capacity used to normalize resource-time (all instances together).
    pub r_total: f64,
    /// Largest request a single instance can hold.
    pub r_instance: u64,
}

pub type Backends = BTreeMap<String, BackendView>;
/// Slack per backend kind, seconds.
pub type Slacks = BTreeMap<String, f64>;

pub fn backend_views(specs: &[BackendSpec]) -> Backends {
    specs
        .iter()
        .map(|b| {
            (
                b.kind.clone(),
                BackendView {
                    price_rate: b.price_rate,
                    r_total: b.total_resources() as f64,
                    r_instance: b.resources_per_instance,
                },
            )
        })
        .collect()
}

/// Sum of current reference latencies from `op` (inclusive) to the end of `path`.
pub fn remaining_path_latency(
    op: &str,
    path: &SequentialPath,
    profiles: &BTreeMap<String, ConfigSpec>,
) -> Result<f64, ConfigError> {
    let start = path.position(op).ok_or_else(|| ConfigError::NotOnPath {
        op: op.to_string(),
        path: path.to_string(),
    })?;
    path.0[start..]
        .iter()
        .map(|v| {
            profiles
                .get(v)
                .map(|s| s.reference_entry().profiled_latency)
                .ok_or_else(|| ConfigError::MissingProfile(v.clone()))
        })
        .sum()
}

/// Per-path slack rule: `own_ref / remaining * (target - t - queueing)`,
/// minimized over the remaining-latency sums of every path through the op.
/// Returns `None` when there are no paths.
pub fn slack_from_paths(
    own_ref: f64,
    remaining: impl IntoIterator<Item = f64>,
    target: f64,
    t: f64,
    queueing: f64,
) -> Option<f64> {
    let budget = target - t - queueing;
    remaining
        .into_iter()
        .map(|rem| own_ref / rem * budget)
        .min_by(f64::total_cmp)
}

/// Slack of an invocation of `op` on a backend whose queueing estimate is
/// `queueing`, at elapsed run time `t`. May be negative once the target is
/// out of reach; an infinite target yields infinite slack.
pub fn compute_slack(
    op: &str,
    paths: &[SequentialPath],
    profiles: &BTreeMap<String, ConfigSpec>,
    target: f64,
    t: f64,
    queueing: f64,
) -> Result<f64, ConfigError> {
    let own = profiles
        .get(op)
        .ok_or_else(|| ConfigError::MissingProfile(op.to_string()))?
        .reference_entry()
        .profiled_latency;
    let remaining = paths
        .iter()
        .filter(|p| p.contains(op))
        .map(|p| remaining_path_latency(op, p, profiles))
        .collect::<Result<Vec<_>, _>>()?;
    slack_from_paths(own, remaining, target, t, queueing).ok_or_else(|| ConfigError::NoPath(op.to_string()))
}

/// Expected wait before new work on a backend starts: queued latency times
/// the share of the backend each queued invocation occupies.
pub fn estimate_queueing(queued: impl IntoIterator<Item = (f64, u64)>, r_total: f64) -> f64 {
    queued
        .into_iter()
        .map(|(l, r)| l * r as f64 / r_total)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    /// Objective value; lower is better.
    pub value: f64,
    /// Monetary cost per item, `R * L * price / B`.
    pub cost_term: f64,
    /// Whether the entry's latency fits inside its slack.
    pub meets_slack: bool,
}

impl Score {
    pub fn penalty(&self) -> f64 {
        self.value - self.cost_term
    }
}

pub fn objective(x: &ConfigEntry, slack: f64, alpha: f64, backend: &BackendView) -> Score {
    let r = x.resource_request as f64;
    let b = x.batch_size as f64;
    let l = x.profiled_latency;
    let cost_term = r * l * backend.price_rate / b;
    let meets_slack = l < slack;
    let value = if meets_slack {
        cost_term
    } else {
        cost_term + alpha * (l * r) / (b * backend.r_total)
    };
    Score {
        value,
        cost_term,
        meets_slack,
    }
}

fn schedulable_on<'a>(x: &ConfigEntry, backends: &'a Backends) -> Option<&'a BackendView> {
    let b = backends.get(&x.backend_kind)?;
    (x.schedulable && x.resource_request <= b.r_instance).then_some(b)
}

/// Tie-break order: objective, cost term, resource request, config id.
fn better(a: (&ConfigEntry, &Score), b: (&ConfigEntry, &Score)) -> bool {
    a.1.value
        .total_cmp(&b.1.value)
        .then_with(|| a.1.cost_term.total_cmp(&b.1.cost_term))
        .then_with(|| a.0.resource_request.cmp(&b.0.resource_request))
        .then_with(|| a.0.config_id.cmp(&b.0.config_id))
        == Ordering::Less
}

/// Index and score of the best schedulable entry accepted by `filter`.
pub fn best_entry(
    spec: &ConfigSpec,
    slacks: &Slacks,
    backends: &Backends,
    alpha: f64,
    mut filter: impl FnMut(&ConfigEntry) -> bool,
) -> Option<(usize, Score)> {
    let mut best: Option<(usize, Score)> = None;
    for (i, x) in spec.entries.iter().enumerate() {
        let Some(view) = schedulable_on(x, backends) else {
            continue;
        };
        if !filter(x) {
            continue;
        }
        let slack = slacks.get(&x.backend_kind).copied().unwrap_or(f64::NEG_INFINITY);
        let s = objective(x, slack, alpha, view);
        if best.map_or(true, |(j, bs)| better((x, &s), (&spec.entries[j], &bs))) {
            best = Some((i, s));
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Assign,
    /// Hold the inputs and wait for more to fill a larger batch.
    Delay,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    /// Index into the spec's entries.
    pub entry: usize,
    pub decision: Decision,
    pub score: Score,
    /// Slack of the chosen entry's backend.
    pub slack: f64,
}

/// Inputs to the delayed-batching safety test.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchingState {
    /// Unfinished invocation inputs at direct predecessors.
    pub upstream_pending: usize,
    /// Expected time until the next upstream output arrives.
    pub projected_wait: f64,
    /// Per backend: the tightest `slack - waited` over inputs already held.
    pub held_margin: Slacks,
}

impl BatchingState {
    fn safe(&self, x: &ConfigEntry, available: usize, slack: f64) -> bool {
        let need = x.batch_size as usize - available;
        let margin = self
            .held_margin
            .get(&x.backend_kind)
            .copied()
            .unwrap_or(f64::INFINITY);
        self.upstream_pending >= need
            && x.profiled_latency < slack
            && self.projected_wait + x.profiled_latency < margin
    }
}

/// Picks the configuration for `available` ready inputs of one operation.
///
/// The global argmin wins outright when it fits the available inputs. When
/// its batch is larger, the inputs are held if `batching` says the wait is
/// safe; otherwise the best entry with a batch no larger than `available` is
/// used, falling back to the global argmin run as a partial batch.
pub fn select_config(
    spec: &ConfigSpec,
    slacks: &Slacks,
    backends: &Backends,
    alpha: f64,
    available: usize,
    batching: Option<&BatchingState>,
) -> Result<Selection, ConfigError> {
    let (best, score) = best_entry(spec, slacks, backends, alpha, |_| true)
        .ok_or_else(|| ConfigError::NothingSchedulable(spec.operation.clone()))?;
    let x = &spec.entries[best];
    let slack_of = |e: &ConfigEntry| slacks.get(&e.backend_kind).copied().unwrap_or(f64::NEG_INFINITY);
    if x.batch_size as usize <= available {
        return Ok(Selection {
            entry: best,
            decision: Decision::Assign,
            score,
            slack: slack_of(x),
        });
    }
    if let Some(state) = batching {
        if state.safe(x, available, slack_of(x)) {
            return Ok(Selection {
                entry: best,
                decision: Decision::Delay,
                score,
                slack: slack_of(x),
            });
        }
    }
    let (entry, score) = best_entry(spec, slacks, backends, alpha, |e| {
        e.batch_size as usize <= available
    })
    .unwrap_or((best, score));
    Ok(Selection {
        entry,
        decision: Decision::Assign,
        score,
        slack: slack_of(&spec.entries[entry]),
    })
}

/// Best objective off `backend` divided by the best objective on it.
pub fn affinity(
    spec: &ConfigSpec,
    backend: &str,
    slacks: &Slacks,
    backends: &Backends,
    alpha: f64,
) -> Result<f64, ConfigError> {
    let on = best_entry(spec, slacks, backends, alpha, |e| e.backend_kind == backend);
    let off = best_entry(spec, slacks, backends, alpha, |e| e.backend_kind != backend);
    match (on, off) {
        (None, _) => Err(ConfigError::NoEntriesOnBackend {
            op: spec.operation.clone(),
            backend: backend.to_string(),
        }),
        (Some(_), None) => Ok(f64::INFINITY),
        (Some((_, on)), Some((_, off))) => Ok(off.value / on.value),
    }
}

/// Default commit-queue bound: how many of the smallest schedulable requests
/// on `backend` run at once when every instance is full.
pub fn default_cq_capacity<'a>(backend: &BackendSpec, specs: impl IntoIterator<Item = &'a ConfigSpec>) -> usize {
    let smallest = specs
        .into_iter()
        .flat_map(|s| s.entries.iter())
        .filter(|e| e.backend_kind == backend.kind && e.schedulable && backend.fits(e.resource_request))
        .map(|e| e.resource_request)
        .min();
    match smallest {
        Some(r) => (backend.instance_count as usize * (backend.resources_per_instance / r) as usize).max(1),
        None => 1,
    }
}
