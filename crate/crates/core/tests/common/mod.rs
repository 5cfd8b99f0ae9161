// Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use slackpipe::cli::{load_inputs, InputArgs, Loaded, TuneArgs};
use slackpipe::configurator::{BackendView, Backends};
use slackpipe::pipeline::{ConfigEntry, ConfigSpec, Edge, PipelineDag};

pub fn entry(kind: &str, r: u64, b: u32, latency: f64) -> ConfigEntry {
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

/// Spec with only a CPU batch-1 entry of the given latency.
pub fn single(op: &str, latency: f64) -> ConfigSpec {
    ConfigSpec::new(op, vec![entry("cpu", 1, 1, latency)]).unwrap()
}

pub fn bundled(name: &str, tune: &TuneArgs) -> Loaded {
    let input = InputArgs {
        bundled: Some(name.into()),
        no_store: true,
        ..InputArgs::default()
    };
    load_inputs(&input, tune).unwrap()
}

/// DAG over `v0..v{n-1}` with edges `i -> j` (i < j) where `mask` has bit set.
pub fn dag_from_mask(n: usize, mask: &[bool]) -> PipelineDag {
    let names: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    let mut edges = Vec::new();
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if mask[k] {
                edges.push(Edge::new(names[i].clone(), names[j].clone()));
            }
            k += 1;
        }
    }
    PipelineDag {
        name: "g".into(),
        operations: names,
        edges,
        branching: vec![],
        branch_predicates: vec![],
        fanout_rules: vec![],
    }
}

pub fn random_dag(rng: &mut impl Rng) -> PipelineDag {
    let n = rng.gen_range(1..=9);
    let p = [0.2, 0.35, 0.5][rng.gen_range(0..3)];
    let mask: Vec<bool> = (0..n * (n - 1) / 2).map(|_| rng.gen_bool(p)).collect();
    dag_from_mask(n, &mask)
}

/// Every source-to-sink path by exhaustive DFS.
pub fn brute_paths(dag: &PipelineDag) -> BTreeSet<Vec<String>> {
    let succ = |v: &str| -> Vec<String> {
        dag.edges.iter().filter(|e| e.from == v).map(|e| e.to.clone()).collect()
    };
    let has_pred = |v: &str| dag.edges.iter().any(|e| e.to == v);
    fn walk(v: String, prefix: &mut Vec<String>, succ: &dyn Fn(&str) -> Vec<String>, out: &mut BTreeSet<Vec<String>>) {
        prefix.push(v.clone());
        let next = succ(&v);
        if next.is_empty() {
            out.insert(prefix.clone());
        }
        for w in next {
            walk(w, prefix, succ, out);
        }
        prefix.pop();
    }
    let mut out = BTreeSet::new();
    for v in dag.operations.iter().filter(|v| !has_pred(v)) {
        walk(v.clone(), &mut Vec::new(), &succ, &mut out);
    }
    out
}

pub fn views() -> Backends {
    [
        (
            "cpu".to_string(),
            BackendView {
                price_rate: 1.0 / 16.0,
                r_total: 96.0,
                r_instance: 16,
            },
        ),
        (
            "gpu".to_string(),
            BackendView {
                price_rate: 1.0 / 4096.0,
                r_total: 16384.0,
                r_instance: 8192,
            },
        ),
    ]
    .into_iter()
    .collect()
}

pub fn random_spec(rng: &mut impl Rng) -> ConfigSpec {
    let n = rng.gen_range(1..=12);
    let mut entries = vec![entry("cpu", 1, 1, rng.gen_range(0.05..10.0))];
    let mut ids = BTreeSet::from([entries[0].config_id.clone()]);
    while entries.len() < n {
        let gpu = rng.gen_bool(0.5);
        let b = 1 << rng.gen_range(0..5);
        let (kind, r) = if gpu {
            ("gpu", 512u64 << rng.gen_range(0..5))
        } else {
            ("cpu", 1u64 << rng.gen_range(0..6))
        };
        let mut e = entry(kind, r, b, rng.gen_range(0.01..10.0));
        e.schedulable = rng.gen_bool(0.9);
        if ids.insert(e.config_id.clone()) {
            entries.push(e);
        }
    }
    ConfigSpec::new("op", entries).unwrap()
}

/// Brute-force argmin of the objective over schedulable entries.
pub fn argmin(spec: &ConfigSpec, slacks: &BTreeMap<String, f64>, views: &Backends, alpha: f64) -> Option<usize> {
    let mut best: Option<(usize, (f64, f64, u64, String))> = None;
    for (i, x) in spec.entries.iter().enumerate() {
        let Some(v) = views.get(&x.backend_kind) else { continue };
        if !x.schedulable || x.resource_request > v.r_instance {
            continue;
        }
        let (r, b, l) = (x.resource_request as f64, x.batch_size as f64, x.profiled_latency);
        let cost = r * l * v.price_rate / b;
        let slack = slacks.get(&x.backend_kind).copied().unwrap_or(f64::NEG_INFINITY);
        let value = if l < slack { cost } else { cost + alpha * (l * r) / (b * v.r_total) };
        let key = (value, cost, x.resource_request, x.config_id.clone());
        let wins = match &best {
            None => true,
            Some((_, k)) => {
                key.0 < k.0
                    || (key.0 == k.0 && key.1 < k.1)
                    || (key.0 == k.0 && key.1 == k.1 && (key.2, &key.3) < (k.2, &k.3))
            }
        };
        if wins {
            best = Some((i, key));
        }
    }
    best.map(|(i, _)| i)
}
