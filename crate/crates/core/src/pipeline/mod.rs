//! Pipelines, operations and their configuration spaces.

mod config;
mod dag;
mod knobs;

pub use config::{reference_config, ConfigEntry, ConfigSpec, OperationSpec, CPU_KIND};
pub use dag::{
    decompose_paths, validate_dag, Attributes, BranchPredicate, Comparison, Edge, FanoutRule,
    PipelineDag, SequentialPath, Violation,
};
pub use knobs::{
    enumerate_configs, HardwareTarget, Knob, KnobAssignment, KnobDomain, KnobTemplate, KnobValue,
    Progression,
};

#[cfg(test)]
pub(crate) use config::entry as test_entry;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid knob template: {0}")]
    InvalidTemplate(String),
    #[error("invalid configuration spec for {operation}: {reason}")]
    InvalidConfigSpec { operation: String, reason: String },
    #[error("operation {0} has no cpu batch-1 configuration to use as reference")]
    NoReference(String),
    #[error("invalid pipeline: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidDag(Vec<Violation>),
}
