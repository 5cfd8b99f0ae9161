use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Exponential smoothing of a latency estimate.
pub fn apply_feedback(old: f64, observed: f64, beta: f64) -> f64 {
    beta * observed + (1.0 - beta) * old
}

/// Observation counts and smoothed corrections behind the latencies held in
/// the specs.
///
/// Smoothing runs on the ratio of observed to baseline latency, shared by all
/// entries of an operation on one backend kind. For the observed entry this is
/// the same update as smoothing its latency directly; the other entries on
/// that backend move with it, so an entry that stopped being picked after an
/// unlucky draw does not keep a stale estimate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStore {
    /// Per operation, per entry.
    pub observations: Vec<Vec<u32>>,
    /// Completed reference invocations per operation.
    pub reference_completions: Vec<u32>,
    /// Per operation, backend kind -> smoothed observed/baseline ratio.
    pub ratios: Vec<BTreeMap<String, f64>>,
}

impl FeedbackStore {
    pub fn new(entries_per_op: impl IntoIterator<Item = usize>) -> Self {
        let observations: Vec<Vec<u32>> = entries_per_op.into_iter().map(|n| vec![0; n]).collect();
        let n = observations.len();
        FeedbackStore {
            observations,
            reference_completions: vec![0; n],
            ratios: vec![BTreeMap::new(); n],
        }
    }

    pub fn ratio(&self, op: usize, backend: &str) -> f64 {
        self.ratios[op].get(backend).copied().unwrap_or(1.0)
    }

    /// Records one completion of `entry`, whose latency before any feedback
    /// was `baseline`. Returns the updated ratio for `(op, backend)`, or
    /// `None` when `update` is false (feedback disabled) or the observation
    /// is unusable.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        op: usize,
        entry: usize,
        backend: &str,
        is_reference: bool,
        baseline: f64,
        observed: f64,
        beta: f64,
        update: bool,
    ) -> Option<f64> {
        self.observations[op][entry] += 1;
        if is_reference {
            self.reference_completions[op] += 1;
        }
        if !update || !(observed > 0.0) || !(baseline > 0.0) {
            return None;
        }
        let old = self.ratio(op, backend);
        let new = apply_feedback(old, observed / baseline, beta);
        self.ratios[op].insert(backend.to_string(), new);
        Some(new)
    }
}
