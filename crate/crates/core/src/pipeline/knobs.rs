//! Knob templates and their expansion into concrete configuration assignments.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// A single knob setting. Integers cover resource sizes and numeric filters,
/// text covers model variants and other categorical choices.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnobValue {
    Int(i64),
    Text(String),
}

impl fmt::Display for KnobValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KnobValue::Int(v) => write!(f, "{v}"),
            KnobValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Progression {
    /// `min, min + step, min + 2*step, ...`
    #[default]
    Linear,
    /// `min, min * step, min * step^2, ...` (e.g. powers of two with `step = 2`)
    Geometric,
}

/// The value set of one knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnobDomain {
    Categorical {
        values: Vec<KnobValue>,
    },
    Ranged {
        min: i64,
        max: i64,
        step: i64,
        #[serde(default)]
        progression: Progression,
    },
}

impl KnobDomain {
    pub fn values(values: impl IntoIterator<Item = KnobValue>) -> Self {
        KnobDomain::Categorical {
            values: values.into_iter().collect(),
        }
    }

    pub fn ints(values: impl IntoIterator<Item = i64>) -> Self {
        Self::values(values.into_iter().map(KnobValue::Int))
    }

    pub fn linear(min: i64, max: i64, step: i64) -> Self {
        KnobDomain::Ranged {
            min,
            max,
            step,
            progression: Progression::Linear,
        }
    }

    pub fn powers(min: i64, max: i64, base: i64) -> Self {
        KnobDomain::Ranged {
            min,
            max,
            step: base,
            progression: Progression::Geometric,
        }
    }

    fn check(&self, what: &str) -> Result<(), PipelineError> {
        let bad = |reason: String| {
            Err(PipelineError::InvalidTemplate(format!("{what}: {reason}")))
        };
        match self {
            KnobDomain::Categorical { values } if values.is_empty() => bad("no values".into()),
            KnobDomain::Categorical { .. } => Ok(()),
            KnobDomain::Ranged { min, max, .. } if min > max => {
                bad(format!("min {min} exceeds max {max}"))
            }
            KnobDomain::Ranged { step, .. } if *step <= 0 => bad(format!("step {step} not positive")),
            KnobDomain::Ranged {
                min,
                step,
                progression: Progression::Geometric,
                ..
            } if *min < 1 || *step < 2 => bad(format!(
                "geometric progression needs min >= 1 and factor >= 2 (got {min}, {step})"
            )),
            KnobDomain::Ranged { .. } => Ok(()),
        }
    }

    /// Expands the domain to its explicit, ordered value list.
    pub fn expand(&self) -> Vec<KnobValue> {
        match self {
            KnobDomain::Categorical { values } => values.clone(),
            KnobDomain::Ranged {
                min,
                max,
                step,
                progression,
            } => {
                let mut out = Vec::new();
                let mut v = *min;
                while v <= *max {
                    out.push(KnobValue::Int(v));
                    v = match progression {
                        Progression::Linear => v.saturating_add(*step),
                        Progression::Geometric => v.saturating_mul(*step),
                    };
                    if v == i64::MAX {
                        break;
                    }
                }
                out
            }
        }
    }

    fn expand_positive(&self, what: &str) -> Result<Vec<u64>, PipelineError> {
        self.expand()
            .into_iter()
            .map(|v| match v {
                KnobValue::Int(i) if i > 0 => Ok(i as u64),
                other => Err(PipelineError::InvalidTemplate(format!(
                    "{what}: value {other} is not a positive integer"
                ))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knob {
    pub name: String,
    pub domain: KnobDomain,
}

/// A backend kind an operation can run on, with the resource sizes it may
/// request there (cores on CPU pools, memory MB on GPUs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareTarget {
    pub kind: String,
    pub resources: KnobDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnobTemplate {
    #[serde(default)]
    pub knobs: Vec<Knob>,
    pub hardware_targets: Vec<HardwareTarget>,
    pub batch_sizes: KnobDomain,
}

/// One point of the configuration space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KnobAssignment {
    pub backend_kind: String,
    pub resource: u64,
    pub batch_size: u32,
    pub knobs: BTreeMap<String, KnobValue>,
}

impl KnobAssignment {
    pub fn config_id(&self) -> String {
        let mut id = format!("{}-r{}-b{}", self.backend_kind, self.resource, self.batch_size);
        for (k, v) in &self.knobs {
            id.push('-');
            id.push_str(k);
            id.push('=');
            id.push_str(&v.to_string());
        }
        id
    }
}

impl KnobTemplate {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.hardware_targets.is_empty() {
            return Err(PipelineError::InvalidTemplate("no hardware targets".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for hw in &self.hardware_targets {
            if !seen.insert(hw.kind.as_str()) {
                return Err(PipelineError::InvalidTemplate(format!(
                    "hardware target {} listed twice",
                    hw.kind
                )));
            }
            hw.resources.check(&format!("resources for {}", hw.kind))?;
            hw.resources
                .expand_positive(&format!("resources for {}", hw.kind))?;
        }
        self.batch_sizes.check("batch_sizes")?;
        self.batch_sizes.expand_positive("batch_sizes")?;
        let mut names = std::collections::BTreeSet::new();
        for knob in &self.knobs {
            if !names.insert(knob.name.as_str()) {
                return Err(PipelineError::InvalidTemplate(format!(
                    "knob {} listed twice",
                    knob.name
                )));
            }
            knob.domain.check(&knob.name)?;
        }
        Ok(())
    }

    /// Number of assignments [`enumerate_configs`] produces, computed
    /// analytically from the domain sizes.
    pub fn cardinality(&self) -> usize {
        let batches = self.batch_sizes.expand().len();
        let knobs: usize = self.knobs.iter().map(|k| k.domain.expand().len()).product();
        self.hardware_targets
            .iter()
            .map(|hw| hw.resources.expand().len())
            .sum::<usize>()
            * batches
            * knobs
    }
}

/// Expands a template into the full cross product of hardware targets (with
/// their resource sizes), batch sizes and knob values, in template order.
pub fn enumerate_configs(template: &KnobTemplate) -> Result<Vec<KnobAssignment>, PipelineError> {
    template.validate()?;
    let batches = template.batch_sizes.expand_positive("batch_sizes")?;
    let knob_values: Vec<(String, Vec<KnobValue>)> = template
        .knobs
        .iter()
        .map(|k| (k.name.clone(), k.domain.expand()))
        .collect();
    let combos: usize = knob_values.iter().map(|(_, v)| v.len()).product();

    let mut out = Vec::with_capacity(template.cardinality());
    for hw in &template.hardware_targets {
        for resource in hw.resources.expand_positive(&hw.kind)? {
            for &batch in &batches {
                let batch_size = u32::try_from(batch).map_err(|_| {
                    PipelineError::InvalidTemplate(format!("batch size {batch} too large"))
                })?;
                // mixed-radix decode over the knob value lists, last knob fastest
                for mut n in 0..combos {
                    let mut knobs = BTreeMap::new();
                    for (name, vals) in knob_values.iter().rev() {
                        knobs.insert(name.clone(), vals[n % vals.len()].clone());
                        n /= vals.len();
                    }
                    out.push(KnobAssignment {
                        backend_kind: hw.kind.clone(),
                        resource,
                        batch_size,
                        knobs,
                    });
                }
            }
        }
    }
    Ok(out)
}
