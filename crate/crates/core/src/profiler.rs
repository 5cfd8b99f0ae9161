//! One-time operation profiling and the on-disk metadata store.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pipeline::{
    enumerate_configs, Attributes, ConfigEntry, ConfigSpec, OperationSpec, PipelineDag,
    PipelineError, SequentialPath,
};
use crate::sim::{
    BackendSpec, FaultPolicy, GroundTruthModel, Job, OpLatencyModel, Sampler, SimError, Simulator,
};

pub const DEFAULT_SAMPLES: u32 = 3;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("operation {operation}: no backend of kind {kind}")]
    MissingBackend { operation: String, kind: String },
    #[error("metadata store {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("metadata file {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// Runs every configuration of `op` on a private, noise-free simulator and
/// returns the resulting spec. Latencies are per batch at zero input items.
pub fn profile_operation(
    op: &OperationSpec,
    model: &OpLatencyModel,
    backends: &[BackendSpec],
    samples_per_config: u32,
) -> Result<ConfigSpec, ProfileError> {
    let samples = samples_per_config.max(1);
    let by_kind: BTreeMap<&str, &BackendSpec> =
        backends.iter().map(|b| (b.kind.as_str(), b)).collect();
    for hw in &op.knob_template.hardware_targets {
        if !by_kind.contains_key(hw.kind.as_str()) {
            return Err(ProfileError::MissingBackend {
                operation: op.name.clone(),
                kind: hw.kind.clone(),
            });
        }
    }

    let truth = GroundTruthModel {
        operations: [(op.name.clone(), model.clone())].into_iter().collect(),
        policy: FaultPolicy::default(),
    };
    let mut sim = Simulator::new(backends.to_vec(), Sampler::new(truth, 0)?)?;

    let mut entries = Vec::new();
    let mut next_id = 0u64;
    for a in enumerate_configs(&op.knob_template)? {
        let kind = by_kind[a.backend_kind.as_str()];
        let mut entry = ConfigEntry {
            config_id: a.config_id(),
            backend_kind: a.backend_kind.clone(),
            knob_values: a.knobs.clone(),
            batch_size: a.batch_size,
            resource_request: a.resource,
            profiled_latency: 0.0,
            profiled_latency_initial: 0.0,
            peak_memory: 0.0,
            schedulable: kind.fits(a.resource),
        };
        let k = model
            .kinds
            .get(&a.backend_kind)
            .ok_or_else(|| SimError::UnsupportedKind {
                operation: op.name.clone(),
                kind: a.backend_kind.clone(),
            })?;
        entry.peak_memory = k.memory_per_item_mb * a.batch_size as f64;

        let latency = if entry.schedulable {
            // running mean, so noise-free samples reproduce the model exactly
            let mut mean = 0.0;
            for n in 1..=samples {
                next_id += 1;
                sim.submit(Job {
                    id: next_id,
                    operation: op.name.clone(),
                    config: entry.clone(),
                    items: vec![Attributes::new(); a.batch_size as usize],
                })?;
                let ev = sim.advance().expect("submitted job completes");
                mean += (ev.latency - mean) / n as f64;
            }
            mean
        } else {
            model.base_latency(&entry).expect("kind checked above")
        };
        entry.profiled_latency = latency;
        entry.profiled_latency_initial = latency;
        entries.push(entry);
    }
    Ok(ConfigSpec::new(op.name.clone(), entries)?)
}

/// Virtual seconds spent profiling: samples times latency, summed over the
/// entries that were actually executed.
pub fn profiling_time_estimate(spec: &ConfigSpec, samples_per_config: u32) -> f64 {
    let samples = samples_per_config.max(1) as f64;
    spec.entries
        .iter()
        .filter(|e| e.schedulable)
        .map(|e| samples * e.profiled_latency_initial)
        .sum()
}

/// Content address of a profile: the executable, its knob template and the
/// backends it was measured on.
pub fn profile_key(op: &OperationSpec, backends: &[BackendSpec]) -> String {
    let mut h = Sha256::new();
    h.update(op.executable_id.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(&op.knob_template).expect("template serializes"));
    h.update([0]);
    let mut sorted: Vec<&BackendSpec> = backends.iter().collect();
    sorted.sort_by(|a, b| a.kind.cmp(&b.kind));
    h.update(serde_json::to_vec(&sorted).expect("backends serialize"));
    hex::encode(h.finalize())
}

/// Directory of content-addressed profiles and decomposed paths.
///
/// ```text
/// specs/<key>.json         ConfigSpec
/// index.json               operation name -> key
/// paths/<dag hash>.json    decomposed sequential paths
/// ```
pub struct MetadataStore {
    root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
}

impl MetadataStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ProfileError> {
        let root = root.into();
        for sub in ["specs", "paths"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|source| ProfileError::Io { path: p, source })?;
        }
        Ok(MetadataStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, ProfileError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| ProfileError::Json {
                    path: path.to_path_buf(),
                    source,
                }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(ProfileError::Io {
                path: path.to_path_buf(),
                source,
            }),
        }
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ProfileError> {
        let mut text = serde_json::to_string_pretty(value).expect("value serializes");
        text.push('\n');
        // write-then-rename so a crash never leaves a torn file behind
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|source| ProfileError::Io {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, path).map_err(|source| ProfileError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    fn index(&self) -> Result<BTreeMap<String, String>, ProfileError> {
        Ok(Self::read_json(&self.root.join("index.json"))?.unwrap_or_default())
    }

    /// Returns the stored profile for `op`, profiling it first on a miss.
    pub fn profile_cached(
        &self,
        op: &OperationSpec,
        model: &OpLatencyModel,
        backends: &[BackendSpec],
        samples_per_config: u32,
    ) -> Result<(ConfigSpec, CacheStatus), ProfileError> {
        let key = profile_key(op, backends);
        let path = self.root.join("specs").join(format!("{key}.json"));
        let (spec, status) = match Self::read_json::<ConfigSpec>(&path)? {
            Some(spec) => (spec, CacheStatus::Hit),
            None => {
                let spec = profile_operation(op, model, backends, samples_per_config)?;
                Self::write_json(&path, &spec)?;
                (spec, CacheStatus::Miss)
            }
        };
        let mut index = self.index()?;
        if index.get(&op.name) != Some(&key) {
            index.insert(op.name.clone(), key);
            Self::write_json(&self.root.join("index.json"), &index)?;
        }
        Ok((spec, status))
    }

    /// Latest profile registered under `operation`.
    pub fn load_spec(&self, operation: &str) -> Result<Option<ConfigSpec>, ProfileError> {
        let Some(key) = self.index()?.get(operation).cloned() else {
            return Ok(None);
        };
        let spec: Option<ConfigSpec> =
            Self::read_json(&self.root.join("specs").join(format!("{key}.json")))?;
        if let Some(s) = &spec {
            s.validate()?;
        }
        Ok(spec)
    }

    /// Decomposed paths for `dag`, computed once per distinct pipeline.
    pub fn paths(&self, dag: &PipelineDag) -> Result<(Vec<SequentialPath>, CacheStatus), ProfileError> {
        let path = self
            .root
            .join("paths")
            .join(format!("{}.json", dag.content_hash()));
        if let Some(paths) = Self::read_json(&path)? {
            return Ok((paths, CacheStatus::Hit));
        }
        let paths = crate::pipeline::decompose_paths(dag)?;
        Self::write_json(&path, &paths)?;
        Ok((paths, CacheStatus::Miss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{HardwareTarget, Knob, KnobDomain, KnobTemplate, KnobValue};
    use crate::sim::KindLatency;

    fn backends() -> Vec<BackendSpec> {
        vec![
            BackendSpec {
                kind: "cpu".into(),
                instance_count: 2,
                resources_per_instance: 16,
                price_rate: 1e-5,
            },
            BackendSpec {
                kind: "gpu".into(),
                instance_count: 1,
                resources_per_instance: 16384,
                price_rate: 1e-8,
            },
        ]
    }

    fn op(template: KnobTemplate) -> OperationSpec {
        OperationSpec {
            name: "detect".into(),
            executable_id: "abc123".into(),
            knob_template: template,
        }
    }

    fn model() -> OpLatencyModel {
        let mut cpu = KindLatency::flat(2.0);
        cpu.resource_exponent = 0.8;
        cpu.batch_exponent = 0.9;
        let mut gpu = KindLatency::flat(0.3);
        gpu.reference_resource = 1024;
        gpu.resource_exponent = 0.5;
        gpu.batch_exponent = 0.4;
        gpu.knob_factors.insert(
            "model".into(),
            [("large".to_string(), 1.7)].into_iter().collect(),
        );
        OpLatencyModel {
            kinds: [("cpu".to_string(), cpu), ("gpu".to_string(), gpu)]
                .into_iter()
                .collect(),
            item_attribute: Some("persons".into()),
        }
    }

    fn twelve() -> KnobTemplate {
        KnobTemplate {
            knobs: vec![Knob {
                name: "model".into(),
                domain: KnobDomain::values([
                    KnobValue::Text("small".into()),
                    KnobValue::Text("large".into()),
                ]),
            }],
            hardware_targets: vec![
                HardwareTarget {
                    kind: "cpu".into(),
                    resources: KnobDomain::ints([1]),
                },
                HardwareTarget {
                    kind: "gpu".into(),
                    resources: KnobDomain::ints([2048]),
                },
            ],
            batch_sizes: KnobDomain::ints([1, 2, 8]),
        }
    }

    #[test]
    fn twelve_configs_three_samples() {
        let spec = profile_operation(&op(twelve()), &model(), &backends(), 3).unwrap();
        assert_eq!(spec.entries.len(), 12);
        assert_eq!(spec.reference, "cpu-r1-b1-model=large");
        assert!(spec.entries.iter().all(|e| e.schedulable));
    }

    #[test]
    fn noise_free_profile_equals_model() {
        let m = model();
        let spec = profile_operation(&op(twelve()), &m, &backends(), 3).unwrap();
        for e in &spec.entries {
            assert_eq!(e.profiled_latency, m.base_latency(e).unwrap(), "{}", e.config_id);
        }
        // per-batch, not per-item
        let b8 = spec.entry("gpu-r2048-b8-model=small").unwrap();
        let b1 = spec.entry("gpu-r2048-b1-model=small").unwrap();
        assert!((b8.profiled_latency / b1.profiled_latency - 8f64.powf(0.4)).abs() < 1e-12);
    }

    #[test]
    fn singleton_template_is_its_own_reference() {
        let t = KnobTemplate {
            knobs: vec![],
            hardware_targets: vec![HardwareTarget {
                kind: "cpu".into(),
                resources: KnobDomain::ints([1]),
            }],
            batch_sizes: KnobDomain::ints([1]),
        };
        let spec = profile_operation(&op(t), &model(), &backends(), 0).unwrap();
        assert_eq!(spec.entries.len(), 1);
        assert_eq!(spec.reference, spec.entries[0].config_id);
    }

    #[test]
    fn oversized_entries_are_flagged() {
        let mut t = twelve();
        t.hardware_targets[0].resources = KnobDomain::ints([1, 32]);
        let spec = profile_operation(&op(t), &model(), &backends(), 1).unwrap();
        let big: Vec<_> = spec.entries.iter().filter(|e| !e.schedulable).collect();
        assert_eq!(big.len(), 6);
        assert!(big.iter().all(|e| e.resource_request == 32));
    }

    #[test]
    fn missing_backend_is_an_error() {
        let spec = profile_operation(&op(twelve()), &model(), &backends()[..1], 1);
        assert!(matches!(spec, Err(ProfileError::MissingBackend { .. })));
    }

    #[test]
    fn time_estimate() {
        let t = KnobTemplate {
            knobs: vec![],
            hardware_targets: vec![HardwareTarget {
                kind: "cpu".into(),
                resources: KnobDomain::linear(1, 10, 1),
            }],
            batch_sizes: KnobDomain::ints([1]),
        };
        let mut m = model();
        m.kinds.get_mut("cpu").unwrap().resource_exponent = 0.0;
        m.kinds.get_mut("cpu").unwrap().base_s = 1.0;
        let spec = profile_operation(&op(t), &m, &backends(), 3).unwrap();
        assert_eq!(profiling_time_estimate(&spec, 3), 30.0);
        assert_eq!(profiling_time_estimate(&spec, 0), 10.0);
    }

    #[test]
    fn reprofiling_is_identical_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let store = MetadataStore::open(dir.path()).unwrap();
        let o = op(twelve());
        let (a, s1) = store.profile_cached(&o, &model(), &backends(), 3).unwrap();
        let (b, s2) = store.profile_cached(&o, &model(), &backends(), 3).unwrap();
        assert_eq!((s1, s2), (CacheStatus::Miss, CacheStatus::Hit));
        assert_eq!(a, b);
        assert_eq!(profile_operation(&o, &model(), &backends(), 3).unwrap(), a);
        assert_eq!(store.load_spec("detect").unwrap(), Some(a));
        assert_eq!(store.load_spec("face").unwrap(), None);
    }

    #[test]
    fn paths_cached_by_pipeline_hash() {
        let dir = tempfile::tempdir().unwrap();
        let store = MetadataStore::open(dir.path()).unwrap();
        let dag = PipelineDag::chain(&["a", "b"]);
        let (p1, s1) = store.paths(&dag).unwrap();
        let (p2, s2) = store.paths(&dag).unwrap();
        assert_eq!((s1, s2), (CacheStatus::Miss, CacheStatus::Hit));
        assert_eq!(p1, p2);
    }
}
