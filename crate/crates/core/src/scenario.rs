//! Scenario files, synthetic workload traces and the bundled example pipelines.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::configurator::TuningParams;
use crate::manager::TraceRecord;
use crate::pipeline::{decompose_paths, Attributes, ConfigSpec, OperationSpec, PipelineDag, PipelineError, SequentialPath};
use crate::profiler::{profile_operation, MetadataStore, ProfileError, DEFAULT_SAMPLES};
use crate::sim::{BackendSpec, GroundTruthModel, SimError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("attribute {attribute}: {reason}")]
    BadWorkload { attribute: String, reason: String },
    #[error("unknown bundled scenario {0}")]
    UnknownBundle(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Per-frame attribute distribution for synthetic traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub frames: u64,
    /// attribute -> list of (value, weight).
    #[serde(default)]
    pub attributes: BTreeMap<String, Vec<(i64, f64)>>,
}

impl WorkloadSpec {
    /// Draws `frames` independent records.
    pub fn generate(&self, seed: u64) -> Result<Vec<TraceRecord>, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dists = Vec::new();
        for (name, choices) in &self.attributes {
            if choices.iter().any(|(v, _)| *v < 0) {
                return Err(ScenarioError::BadWorkload {
                    attribute: name.clone(),
                    reason: "negative value".into(),
                });
            }
            let w = WeightedIndex::new(choices.iter().map(|(_, w)| *w)).map_err(|e| {
                ScenarioError::BadWorkload {
                    attribute: name.clone(),
                    reason: e.to_string(),
                }
            })?;
            dists.push((name, choices, w));
        }
        Ok((0..self.frames)
            .map(|frame_id| {
                let attributes: Attributes = dists
                    .iter()
                    .map(|(name, choices, w)| ((*name).clone(), choices[w.sample(&mut rng)].0))
                    .collect();
                TraceRecord {
                    frame_id,
                    attributes,
                }
            })
            .collect())
    }
}

/// Backends, ground truth and defaults for a family of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub backends: Vec<BackendSpec>,
    pub model: GroundTruthModel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dispatch_overhead_s: f64,
    #[serde(default)]
    pub params: TuningParams,
    #[serde(default = "default_samples")]
    pub profile_samples: u32,
    #[serde(default)]
    pub workload: Option<WorkloadSpec>,
}

fn default_samples() -> u32 {
    DEFAULT_SAMPLES
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for b in &self.backends {
            b.validate()?;
        }
        self.model.policy.validate()?;
        Ok(())
    }
}

/// A pipeline with its operations and scenario.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub dag: PipelineDag,
    pub operations: Vec<OperationSpec>,
    pub scenario: Scenario,
}

/// Profiles and paths ready for a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub paths: Vec<SequentialPath>,
    pub profiles: BTreeMap<String, ConfigSpec>,
}

impl Bundle {
    pub fn trace(&self) -> Result<Vec<TraceRecord>, ScenarioError> {
        match &self.scenario.workload {
            Some(w) => w.generate(self.scenario.seed),
            None => Ok(Vec::new()),
        }
    }

    /// Decomposes the pipeline and profiles every operation, through the
    /// metadata store when one is given.
    pub fn prepare(&self, store: Option<&MetadataStore>) -> Result<Prepared, ScenarioError> {
        self.scenario.validate()?;
        let paths = match store {
            Some(s) => s.paths(&self.dag)?.0,
            None => decompose_paths(&self.dag)?,
        };
        let mut profiles = BTreeMap::new();
        for op in &self.operations {
            let model = self.scenario.model.op(&op.name)?;
            let spec = match store {
                Some(s) => {
                    s.profile_cached(op, model, &self.scenario.backends, self.scenario.profile_samples)?
                        .0
                }
                None => profile_operation(op, model, &self.scenario.backends, self.scenario.profile_samples)?,
            };
            profiles.insert(op.name.clone(), spec);
        }
        Ok(Prepared { paths, profiles })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ScenarioError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn parse<T: DeserializeOwned>(name: &str, text: &str) -> Result<T, ScenarioError> {
    serde_json::from_str(text).map_err(|source| ScenarioError::Json {
        path: name.to_string(),
        source,
    })
}

macro_rules! bundle_files {
    ($name:literal) => {
        (
            include_str!(concat!("../scenarios/", $name, "/pipeline.json")),
            include_str!(concat!("../scenarios/", $name, "/operations.json")),
            include_str!(concat!("../scenarios/", $name, "/scenario.json")),
        )
    };
}

pub const BUNDLED: [&str; 3] = ["amber", "toonify", "synthetic"];

/// Raw JSON of a bundled scenario: (pipeline, operations, scenario).
pub fn bundled_files(name: &str) -> Option<(&'static str, &'static str, &'static str)> {
    Some(match name {
        "amber" => bundle_files!("amber"),
        "toonify" => bundle_files!("toonify"),
        "synthetic" => bundle_files!("synthetic"),
        _ => return None,
    })
}

pub fn bundled(name: &str) -> Result<Bundle, ScenarioError> {
    let (p, o, s) = bundled_files(name).ok_or_else(|| ScenarioError::UnknownBundle(name.to_string()))?;
    Ok(Bundle {
        dag: parse(&format!("{name}/pipeline.json"), p)?,
        operations: parse(&format!("{name}/operations.json"), o)?,
        scenario: parse(&format!("{name}/scenario.json"), s)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::validate_dag;

    #[test]
    fn bundles_parse_and_validate() {
        for name in BUNDLED {
            let b = bundled(name).unwrap();
            assert!(validate_dag(&b.dag).is_empty(), "{name}");
            b.scenario.validate().unwrap();
            let names: Vec<&str> = b.operations.iter().map(|o| o.name.as_str()).collect();
            assert_eq!(names.len(), b.dag.operations.len(), "{name}");
            for op in &b.dag.operations {
                assert!(names.contains(&op.as_str()), "{name}: {op}");
            }
        }
    }

    #[test]
    fn workload_is_seeded() {
        let w = WorkloadSpec {
            frames: 50,
            attributes: [("persons".to_string(), vec![(0, 1.0), (3, 1.0)])].into_iter().collect(),
        };
        let a = w.generate(7).unwrap();
        assert_eq!(a, w.generate(7).unwrap());
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|r| matches!(r.attributes["persons"], 0 | 3)));
        assert!(a.iter().any(|r| r.attributes["persons"] == 3));
        assert!(a.iter().any(|r| r.attributes["persons"] == 0));
    }

    #[test]
    fn workload_rejects_bad_weights() {
        let w = WorkloadSpec {
            frames: 1,
            attributes: [("x".to_string(), vec![(1, 0.0)])].into_iter().collect(),
        };
        assert!(w.generate(0).is_err());
    }
}
