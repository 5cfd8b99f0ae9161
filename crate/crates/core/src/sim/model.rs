//! Ground-truth latency models and the random draws made against them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::pipeline::{Attributes, ConfigEntry};

/// Latency of one operation on one backend kind.
///
/// `base = base_s * (R / reference_resource)^-resource_exponent * B^batch_exponent * knob factors`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindLatency {
    pub base_s: f64,
    #[serde(default = "one_u64")]
    pub reference_resource: u64,
    #[serde(default)]
    pub resource_exponent: f64,
    #[serde(default)]
    pub batch_exponent: f64,
    /// Seconds added per counted item (see [`OpLatencyModel::item_attribute`]).
    #[serde(default)]
    pub per_item_s: f64,
    /// knob name -> rendered value -> multiplier; unlisted values multiply by 1.
    #[serde(default)]
    pub knob_factors: BTreeMap<String, BTreeMap<String, f64>>,
    /// Peak memory per batch slot, MB.
    #[serde(default)]
    pub memory_per_item_mb: f64,
}

fn one_u64() -> u64 {
    1
}

impl KindLatency {
    pub fn flat(base_s: f64) -> Self {
        KindLatency {
            base_s,
            reference_resource: 1,
            resource_exponent: 0.0,
            batch_exponent: 0.0,
            per_item_s: 0.0,
            knob_factors: BTreeMap::new(),
            memory_per_item_mb: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpLatencyModel {
    pub kinds: BTreeMap<String, KindLatency>,
    /// Input attribute whose value counts as work items (e.g. faces in a frame).
    #[serde(default)]
    pub item_attribute: Option<String>,
}

impl OpLatencyModel {
    pub fn base_latency(&self, config: &ConfigEntry) -> Option<f64> {
        let k = self.kinds.get(&config.backend_kind)?;
        let scale = config.resource_request as f64 / k.reference_resource.max(1) as f64;
        let mut l = k.base_s
            * scale.powf(-k.resource_exponent)
            * (config.batch_size as f64).powf(k.batch_exponent);
        for (knob, value) in &config.knob_values {
            if let Some(f) = k
                .knob_factors
                .get(knob)
                .and_then(|m| m.get(&value.to_string()))
            {
                l *= f;
            }
        }
        Some(l)
    }

    pub fn item_count(&self, items: &[Attributes]) -> u64 {
        let Some(attr) = &self.item_attribute else {
            return 0;
        };
        items
            .iter()
            .map(|a| a.get(attr).copied().unwrap_or(0).max(0) as u64)
            .sum()
    }

    /// Noise-free latency of running `config` over `items`.
    pub fn nominal_latency(&self, config: &ConfigEntry, items: &[Attributes]) -> Option<f64> {
        let per_item = self.kinds.get(&config.backend_kind)?.per_item_s;
        Some(self.base_latency(config)? + per_item * self.item_count(items) as f64)
    }
}

/// Execution noise and injected faults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPolicy {
    /// Log-normal sigma of the multiplicative noise (median 1); 0 disables it.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub failure_rate: f64,
    #[serde(default)]
    pub straggle_rate: f64,
    #[serde(default = "one_f64")]
    pub straggle_factor: f64,
    /// Systematic multiplier on every runtime latency, i.e. error the profiler
    /// never sees.
    #[serde(default = "one_f64")]
    pub latency_bias: f64,
}

fn one_f64() -> f64 {
    1.0
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy {
            noise_sigma: 0.0,
            failure_rate: 0.0,
            straggle_rate: 0.0,
            straggle_factor: 1.0,
            latency_bias: 1.0,
        }
    }
}

impl FaultPolicy {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && (0.0..=1.0).contains(&self.failure_rate)
            && (0.0..=1.0).contains(&self.straggle_rate)
            && self.straggle_factor > 0.0
            && self.latency_bias > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidPolicy(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub operations: BTreeMap<String, OpLatencyModel>,
    #[serde(default)]
    pub policy: FaultPolicy,
}

impl GroundTruthModel {
    pub fn op(&self, name: &str) -> Result<&OpLatencyModel, SimError> {
        self.operations
            .get(name)
            .ok_or_else(|| SimError::UnknownOperation(name.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Straggle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub latency: f64,
    pub outcome: Outcome,
}

/// Seeded source of actual latencies. The failure and straggle draws are
/// made on every call, so changing one rate never shifts the other's stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    model: GroundTruthModel,
    rng: ChaCha8Rng,
    noise: Option<LogNormal<f64>>,
}

impl Sampler {
    pub fn new(model: GroundTruthModel, seed: u64) -> Result<Self, SimError> {
        model.policy.validate()?;
        let noise = if model.policy.noise_sigma > 0.0 {
            Some(
                LogNormal::new(0.0, model.policy.noise_sigma)
                    .map_err(|e| SimError::InvalidPolicy(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Sampler {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
        })
    }

    pub fn model(&self) -> &GroundTruthModel {
        &self.model
    }

    pub fn draw_actual_latency(
        &mut self,
        operation: &str,
        config: &ConfigEntry,
        items: &[Attributes],
    ) -> Result<Draw, SimError> {
        let nominal = self
            .model
            .op(operation)?
            .nominal_latency(config, items)
            .ok_or_else(|| SimError::UnsupportedKind {
                operation: operation.to_string(),
                kind: config.backend_kind.clone(),
            })?;
        let p = &self.model.policy;
        let z: f64 = match &self.noise {
            Some(d) => d.sample(&mut self.rng),
            None => {
                let _: f64 = self.rng.gen();
                1.0
            }
        };
        let fail = self.rng.gen::<f64>() < p.failure_rate;
        let straggle = self.rng.gen::<f64>() < p.straggle_rate;
        let mut latency = nominal * z * p.latency_bias;
        let outcome = if fail {
            Outcome::Failure
        } else if straggle {
            latency *= p.straggle_factor;
            Outcome::Straggle
        } else {
            Outcome::Success
        };
        Ok(Draw {
            latency: latency.max(f64::MIN_POSITIVE),
            outcome,
        })
    }
}

/// Returns `model` with its fault rates replaced, paired with a sampler
/// seeded by `seed`.
pub fn inject_fault_policy(
    mut model: GroundTruthModel,
    failure_rate: f64,
    straggle_rate: f64,
    straggle_factor: f64,
    seed: u64,
) -> Result<Sampler, SimError> {
    model.policy.failure_rate = failure_rate;
    model.policy.straggle_rate = straggle_rate;
    model.policy.straggle_factor = straggle_factor;
    Sampler::new(model, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::test_entry;

    fn model(base: f64, per_item: f64) -> GroundTruthModel {
        let mut k = KindLatency::flat(base);
        k.per_item_s = per_item;
        let mut ops = BTreeMap::new();
        ops.insert(
            "op".to_string(),
            OpLatencyModel {
                kinds: [("cpu".to_string(), k)].into_iter().collect(),
                item_attribute: Some("faces".into()),
            },
        );
        GroundTruthModel {
            operations: ops,
            policy: FaultPolicy::default(),
        }
    }

    fn attrs(faces: i64) -> Vec<Attributes> {
        vec![[("faces".to_string(), faces)].into_iter().collect()]
    }

    #[test]
    fn noiseless_base() {
        let mut s = Sampler::new(model(2.0, 0.0), 1).unwrap();
        let d = s
            .draw_actual_latency("op", &test_entry("cpu", 1, 1, 1.0), &attrs(0))
            .unwrap();
        assert_eq!(d.latency, 2.0);
        assert_eq!(d.outcome, Outcome::Success);
    }

    #[test]
    fn per_item_growth() {
        let mut s = Sampler::new(model(0.5, 0.2), 1).unwrap();
        let d = s
            .draw_actual_latency("op", &test_entry("cpu", 1, 1, 1.0), &attrs(60))
            .unwrap();
        assert!((d.latency - 12.5).abs() < 1e-12);
    }

    #[test]
    fn certain_straggle_multiplies() {
        let mut s = inject_fault_policy(model(1.0, 0.0), 0.0, 1.0, 10.0, 3).unwrap();
        let d = s
            .draw_actual_latency("op", &test_entry("cpu", 1, 1, 1.0), &attrs(0))
            .unwrap();
        assert_eq!(d.latency, 10.0);
        assert_eq!(d.outcome, Outcome::Straggle);

        let mut s = inject_fault_policy(model(2.0, 0.0), 0.0, 1.0, 1.5, 3).unwrap();
        for _ in 0..100 {
            let d = s
                .draw_actual_latency("op", &test_entry("cpu", 1, 1, 1.0), &attrs(0))
                .unwrap();
            assert_eq!(d.latency, 3.0);
        }
    }

    #[test]
    fn failure_rate_is_binomial() {
        let mut s = inject_fault_policy(model(1.0, 0.0), 0.03, 0.0, 1.0, 42).unwrap();
        let e = test_entry("cpu", 1, 1, 1.0);
        let fails = (0..10_000)
            .filter(|_| {
                s.draw_actual_latency("op", &e, &attrs(0)).unwrap().outcome == Outcome::Failure
            })
            .count();
        // mean 300, sd ~17.1; 4 sd either way
        assert!((232..=368).contains(&fails), "{fails}");

        let mut s = inject_fault_policy(model(1.0, 0.0), 0.0, 0.0, 1.0, 42).unwrap();
        assert!((0..10_000)
            .all(|_| s.draw_actual_latency("op", &e, &attrs(0)).unwrap().outcome == Outcome::Success));
    }

    #[test]
    fn resource_and_batch_scaling() {
        let mut m = model(8.0, 0.0);
        let k = m.operations.get_mut("op").unwrap().kinds.get_mut("cpu").unwrap();
        k.resource_exponent = 1.0;
        k.batch_exponent = 0.5;
        let op = &m.operations["op"];
        assert_eq!(op.base_latency(&test_entry("cpu", 4, 4, 1.0)), Some(4.0));
        assert_eq!(op.base_latency(&test_entry("gpu", 4, 4, 1.0)), None);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut m = model(1.0, 0.0);
        m.policy.noise_sigma = 0.3;
        let e = test_entry("cpu", 1, 1, 1.0);
        let mut a = Sampler::new(m.clone(), 9).unwrap();
        let mut b = Sampler::new(m, 9).unwrap();
        for _ in 0..50 {
            let x = a.draw_actual_latency("op", &e, &attrs(0)).unwrap();
            let y = b.draw_actual_latency("op", &e, &attrs(0)).unwrap();
            assert_eq!(x.latency.to_bits(), y.latency.to_bits());
        }
    }
}
