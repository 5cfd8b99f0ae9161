//! Discrete-event simulation of serverless CPU pools and shared GPUs.

mod engine;
mod model;

pub use engine::{Admission, EventKind, Job, SimEvent, Simulator, Started};
pub use model::{
    inject_fault_policy, Draw, FaultPolicy, GroundTruthModel, KindLatency, OpLatencyModel,
    Outcome, Sampler,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::ConfigEntry;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid backend {kind}: {reason}")]
    InvalidBackend { kind: String, reason: String },
    #[error("no backend of kind {0}")]
    UnknownBackend(String),
    #[error("request of {request} exceeds the {capacity} units of a {kind} instance")]
    Oversized {
        kind: String,
        request: u64,
        capacity: u64,
    },
    #[error("no ground-truth model for operation {0}")]
    UnknownOperation(String),
    #[error("operation {operation} has no latency model for backend kind {kind}")]
    UnsupportedKind { operation: String, kind: String },
    #[error("invalid fault policy: {0}")]
    InvalidPolicy(String),
    #[error("clock cannot move from {now} to {to}")]
    ClockOrder { now: f64, to: f64 },
}

/// A pool of identical serverless instances. Resources are cores on CPU
/// pools and memory MB on GPUs, where concurrent invocations share an
/// instance in proportion to the memory they request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: String,
    pub instance_count: u32,
    pub resources_per_instance: u64,
    /// Currency per resource-unit second.
    pub price_rate: f64,
}

impl BackendSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: &str| {
            Err(SimError::InvalidBackend {
                kind: self.kind.clone(),
                reason: reason.into(),
            })
        };
        if self.instance_count == 0 {
            return bad("instance_count must be positive");
        }
        if self.resources_per_instance == 0 {
            return bad("resources_per_instance must be positive");
        }
        if !(self.price_rate > 0.0 && self.price_rate.is_finite()) {
            return bad("price_rate must be positive");
        }
        Ok(())
    }

    /// Resources across all instances.
    pub fn total_resources(&self) -> u64 {
        self.resources_per_instance * self.instance_count as u64
    }

    pub fn fits(&self, resource: u64) -> bool {
        resource <= self.resources_per_instance
    }
}

pub fn invocation_cost(config: &ConfigEntry, actual_latency: f64, spec: &BackendSpec) -> f64 {
    config.resource_request as f64 * actual_latency * spec.price_rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::test_entry;

    #[test]
    fn cost_formula() {
        let cpu = BackendSpec {
            kind: "cpu".into(),
            instance_count: 1,
            resources_per_instance: 64,
            price_rate: 0.001,
        };
        let c = invocation_cost(&test_entry("cpu", 1, 1, 1.0), 2.0, &cpu);
        assert!((c - 0.002).abs() < 1e-15);
        let gpu = BackendSpec {
            kind: "gpu".into(),
            instance_count: 1,
            resources_per_instance: 16384,
            price_rate: 5e-7,
        };
        let c = invocation_cost(&test_entry("gpu", 2048, 1, 1.0), 4.0, &gpu);
        assert!((c - 0.004096).abs() < 1e-15);
    }

    #[test]
    fn backend_validation() {
        let mut b = BackendSpec {
            kind: "cpu".into(),
            instance_count: 1,
            resources_per_instance: 64,
            price_rate: 0.0,
        };
        assert!(b.validate().is_err());
        b.price_rate = 1.0;
        assert!(b.validate().is_ok());
        b.resources_per_instance = 0;
        assert!(b.validate().is_err());
    }
}
