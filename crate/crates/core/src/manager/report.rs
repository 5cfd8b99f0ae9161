use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// JSON has no infinities; these fields write them as "inf" / "-inf" strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::num(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "NaN" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("not a number: {t}"))),
            },
        }
    }
}

/// One executed invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub id: u64,
    pub operation: String,
    pub config_id: String,
    pub backend: String,
    pub items: usize,
    pub attempt: u32,
    pub warmup: bool,
    /// Slack allotted when the invocation was committed.
    #[serde(with = "extended_f64")]
    pub slack: f64,
    pub commit_time: f64,
    pub start_time: f64,
    pub latency: f64,
    pub cost: f64,
    pub failed: bool,
    pub met_slack: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadStats {
    pub speculate_decisions: usize,
    pub commit_decisions: usize,
    pub speculate_median_ms: f64,
    pub speculate_mean_ms: f64,
    pub commit_median_ms: f64,
    pub commit_mean_ms: f64,
    /// Wall-clock seconds for the whole run, simulation included.
    pub wall_s: f64,
}

impl OverheadStats {
    pub fn from_samples(speculate_ns: &mut [u64], commit_ns: &mut [u64], wall_s: f64) -> Self {
        fn median_mean(v: &mut [u64]) -> (f64, f64) {
            if v.is_empty() {
                return (0.0, 0.0);
            }
            v.sort_unstable();
            let n = v.len();
            let median = if n % 2 == 1 {
                v[n / 2] as f64
            } else {
                (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
            };
            let mean = v.iter().sum::<u64>() as f64 / n as f64;
            (median / 1e6, mean / 1e6)
        }
        let (sm, sa) = median_mean(speculate_ns);
        let (cm, ca) = median_mean(commit_ns);
        OverheadStats {
            speculate_decisions: speculate_ns.len(),
            commit_decisions: commit_ns.len(),
            speculate_median_ms: sm,
            speculate_mean_ms: sa,
            commit_median_ms: cm,
            commit_mean_ms: ca,
            wall_s,
        }
    }

    /// Decisions per wall-clock second over the whole run.
    pub fn decisions_per_second(&self) -> f64 {
        if self.wall_s > 0.0 {
            (self.speculate_decisions + self.commit_decisions) as f64 / self.wall_s
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    #[serde(with = "extended_f64")]
    pub target_s: f64,
    pub latency_s: f64,
    #[serde(with = "extended_f64")]
    pub normalized_latency: f64,
    pub cost: f64,
    pub slack_met_frac: f64,
    pub configs_used: usize,
    pub failures: u64,
    pub duplicates: u64,
    pub invocations: usize,
    /// `operation/config_id` -> committed invocations.
    pub config_usage: BTreeMap<String, usize>,
    /// Terminal-operation outputs per trace frame.
    pub terminal_items: BTreeMap<u64, u64>,
    pub records: Vec<InvocationRecord>,
    pub overhead: OverheadStats,
    /// Run settings (flags, seed, scenario) for auditability.
    pub metadata: BTreeMap<String, String>,
}

pub const CSV_HEADER: &str =
    "run_id,target_s,latency_s,normalized_latency,cost,slack_met_frac,configs_used,failures,duplicates";

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

impl RunReport {
    pub fn met_target(&self) -> bool {
        self.normalized_latency <= 1.0
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.run_id,
            num(self.target_s),
            num(self.latency_s),
            num(self.normalized_latency),
            num(self.cost),
            num(self.slack_met_frac),
            self.configs_used,
            self.failures,
            self.duplicates
        )
    }

    pub fn csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    /// Human-readable summary block.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run {}", self.run_id);
        let _ = writeln!(s, "  target          {} s", num(self.target_s));
        let _ = writeln!(
            s,
            "  latency         {:.3} s ({} of target)",
            self.latency_s,
            num(self.normalized_latency)
        );
        let _ = writeln!(s, "  cost            {:.6}", self.cost);
        let _ = writeln!(s, "  invocations     {}", self.invocations);
        let _ = writeln!(s, "  slack met       {:.1}%", 100.0 * self.slack_met_frac);
        let _ = writeln!(s, "  configs used    {}", self.configs_used);
        let _ = writeln!(s, "  failures        {}", self.failures);
        let _ = writeln!(s, "  duplicates      {}", self.duplicates);
        let _ = writeln!(
            s,
            "  decision time   speculate {:.4} ms, commit {:.4} ms (median)",
            self.overhead.speculate_median_ms, self.overhead.commit_median_ms
        );
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "  {k:<15} {v}");
        }
        s
    }
}
