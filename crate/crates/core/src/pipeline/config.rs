use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::knobs::{KnobTemplate, KnobValue};
use super::PipelineError;

/// Backend kind whose smallest batch-1 configuration is the reference.
pub const CPU_KIND: &str = "cpu";

/// An operation as registered in the metadata store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationSpec {
    pub name: String,
    /// Content hash of the operation's executable.
    pub executable_id: String,
    pub knob_template: KnobTemplate,
}

/// One profiled configuration of an operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub config_id: String,
    pub backend_kind: String,
    pub knob_values: BTreeMap<String, KnobValue>,
    pub batch_size: u32,
    /// Cores on CPU backends, memory MB on GPU backends.
    pub resource_request: u64,
    /// Current (smoothed) per-batch latency estimate, seconds.
    pub profiled_latency: f64,
    /// Latency reported by the profiler, kept for diagnostics.
    pub profiled_latency_initial: f64,
    pub peak_memory: f64,
    /// False when no backend instance of `backend_kind` can fit the request.
    #[serde(default = "default_true")]
    pub schedulable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpec {
    pub operation: String,
    pub entries: Vec<ConfigEntry>,
    /// `config_id` of the reference configuration.
    pub reference: String,
}

impl ConfigSpec {
    /// Builds a spec from profiled entries and designates its reference.
    pub fn new(operation: impl Into<String>, entries: Vec<ConfigEntry>) -> Result<Self, PipelineError> {
        let mut spec = ConfigSpec {
            operation: operation.into(),
            entries,
            reference: String::new(),
        };
        spec.reference = reference_config(&spec)?.config_id.clone();
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.config_id.as_str()) {
                return Err(PipelineError::InvalidConfigSpec {
                    operation: self.operation.clone(),
                    reason: format!("duplicate config_id {}", e.config_id),
                });
            }
            if !(e.profiled_latency > 0.0) || e.resource_request == 0 || e.batch_size == 0 {
                return Err(PipelineError::InvalidConfigSpec {
                    operation: self.operation.clone(),
                    reason: format!("entry {} needs L > 0, R > 0 and B >= 1", e.config_id),
                });
            }
        }
        let expected = reference_config(self)?;
        if expected.config_id != self.reference {
            return Err(PipelineError::InvalidConfigSpec {
                operation: self.operation.clone(),
                reason: format!(
                    "reference {} is not the smallest cpu batch-1 entry ({})",
                    self.reference, expected.config_id
                ),
            });
        }
        Ok(())
    }

    pub fn entry(&self, config_id: &str) -> Option<&ConfigEntry> {
        self.entries.iter().find(|e| e.config_id == config_id)
    }

    pub fn reference_entry(&self) -> &ConfigEntry {
        self.entry(&self.reference)
            .expect("validated spec has its reference entry")
    }

    /// Multiplies every latency estimate by `factor`; used to emulate
    /// mis-profiled operations.
    pub fn scale_latencies(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.profiled_latency *= factor;
            e.profiled_latency_initial *= factor;
        }
    }
}

/// Returns the reference configuration: CPU, batch 1, minimal resource
/// request, ties broken by the lexicographically smallest knob values.
pub fn reference_config(spec: &ConfigSpec) -> Result<&ConfigEntry, PipelineError> {
    spec.entries
        .iter()
        .filter(|e| e.backend_kind == CPU_KIND && e.batch_size == 1 && e.schedulable)
        .min_by(|a, b| {
            a.resource_request
                .cmp(&b.resource_request)
                .then_with(|| a.knob_values.cmp(&b.knob_values))
        })
        .ok_or_else(|| PipelineError::NoReference(spec.operation.clone()))
}

#[cfg(test)]
pub(crate) fn entry(kind: &str, r: u64, b: u32, latency: f64) -> ConfigEntry {
    ConfigEntry {
        config_id: format!("{kind}-r{r}-b{b}"),
        backend_kind: kind.into(),
        knob_values: BTreeMap::new(),
        batch_size: b,
        resource_request: r,
        profiled_latency: latency,
        profiled_latency_initial: latency,
        peak_memory: 0.0,
        schedulable: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_smallest_cpu_batch_one() {
        let spec = ConfigSpec::new(
            "detect",
            vec![
                entry("cpu", 4, 1, 1.0),
                entry("cpu", 1, 1, 3.0),
                entry("gpu", 2048, 8, 0.5),
            ],
        )
        .unwrap();
        assert_eq!(spec.reference, "cpu-r1-b1");
    }

    #[test]
    fn singleton_is_its_own_reference() {
        let spec = ConfigSpec::new("decode", vec![entry("cpu", 1, 1, 0.2)]).unwrap();
        assert_eq!(reference_config(&spec).unwrap().config_id, "cpu-r1-b1");
    }

    #[test]
    fn ties_break_on_knob_values() {
        let mut a = entry("cpu", 1, 1, 1.0);
        a.config_id = "cpu-r1-b1-radius=5".into();
        a.knob_values.insert("radius".into(), KnobValue::Int(5));
        let mut b = entry("cpu", 1, 1, 1.0);
        b.config_id = "cpu-r1-b1-radius=3".into();
        b.knob_values.insert("radius".into(), KnobValue::Int(3));
        let spec = ConfigSpec::new("blur", vec![a, b]).unwrap();
        assert_eq!(spec.reference, "cpu-r1-b1-radius=3");
    }

    #[test]
    fn missing_cpu_batch_one_names_the_operation() {
        let err = ConfigSpec::new("face", vec![entry("gpu", 1024, 1, 0.1)]).unwrap_err();
        assert!(err.to_string().contains("face"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = ConfigSpec::new("x", vec![entry("cpu", 1, 1, 1.0), entry("cpu", 1, 1, 2.0)])
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
