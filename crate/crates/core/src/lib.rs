//! Deadline-aware configuration tuning for DAG pipelines on simulated
//! serverless backends.

pub mod cli;
pub mod configurator;
pub mod manager;
pub mod pipeline;
pub mod profiler;
pub mod scenario;
pub mod sim;
