//! Pipeline DAGs: structure, validation and decomposition into sequential paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

/// Attribute record attached to every input item (one per trace frame).
pub type Attributes = BTreeMap<String, i64>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

impl Edge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Edge {
            from: from.into(),
            to: to.into(),
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

/// Guard on a branch edge, evaluated over an item's integer attributes.
/// Missing attributes read as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchPredicate {
    pub from: String,
    pub to: String,
    pub attribute: String,
    pub op: Comparison,
    pub value: i64,
}

impl BranchPredicate {
    pub fn holds(&self, attrs: &Attributes) -> bool {
        let v = attrs.get(&self.attribute).copied().unwrap_or(0);
        match self.op {
            Comparison::Gt => v > self.value,
            Comparison::Ge => v >= self.value,
            Comparison::Lt => v < self.value,
            Comparison::Le => v <= self.value,
            Comparison::Eq => v == self.value,
            Comparison::Ne => v != self.value,
        }
    }
}

/// Emits one downstream item per unit of `attribute` along an edge (one face
/// crop per detected person, say). Edges without a rule emit exactly one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoutRule {
    pub from: String,
    pub to: String,
    pub attribute: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineDag {
    #[serde(default)]
    pub name: String,
    /// Vertex (operation) names.
    pub operations: Vec<String>,
    pub edges: Vec<Edge>,
    /// Vertices whose outputs conditionally select downstream edges.
    #[serde(default)]
    pub branching: Vec<String>,
    #[serde(default)]
    pub branch_predicates: Vec<BranchPredicate>,
    #[serde(default)]
    pub fanout_rules: Vec<FanoutRule>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Empty,
    DuplicateVertex(String),
    UnknownVertex { edge: Edge, vertex: String },
    DuplicateEdge(Edge),
    Cycle(Vec<String>),
    NoInputVertex,
    NoOutputVertex,
    UnknownBranchingVertex(String),
    PredicateOnNonBranching(Edge),
    PredicateWithoutEdge(Edge),
    DuplicatePredicate(Edge),
    FanoutWithoutEdge(Edge),
    DuplicateFanout(Edge),
    /// Fan-out items carry their own lineage and can never meet the other
    /// inputs of a join, so joins may not sit downstream of a fan-out edge.
    FanoutIntoJoin { edge: Edge, join: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "pipeline has no operations"),
            Violation::DuplicateVertex(v) => write!(f, "operation {v} declared twice"),
            Violation::UnknownVertex { edge, vertex } => {
                write!(f, "edge {edge} references unknown operation {vertex}")
            }
            Violation::DuplicateEdge(e) => write!(f, "edge {e} declared twice"),
            Violation::Cycle(vs) => write!(f, "cycle through {}", vs.join(", ")),
            Violation::NoInputVertex => write!(f, "no input operation (without predecessors)"),
            Violation::NoOutputVertex => write!(f, "no output operation (without successors)"),
            Violation::UnknownBranchingVertex(v) => {
                write!(f, "branching vertex {v} is not an operation")
            }
            Violation::PredicateOnNonBranching(e) => {
                write!(f, "predicate on edge {e} but {} is not branching", e.from)
            }
            Violation::PredicateWithoutEdge(e) => write!(f, "predicate on missing edge {e}"),
            Violation::DuplicatePredicate(e) => write!(f, "edge {e} has two predicates"),
            Violation::FanoutWithoutEdge(e) => write!(f, "fan-out rule on missing edge {e}"),
            Violation::DuplicateFanout(e) => write!(f, "edge {e} has two fan-out rules"),
            Violation::FanoutIntoJoin { edge, join } => {
                write!(f, "fan-out edge {edge} feeds join operation {join}")
            }
        }
    }
}

/// A path from an input operation to an output operation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SequentialPath(pub Vec<String>);

impl SequentialPath {
    pub fn contains(&self, op: &str) -> bool {
        self.0.iter().any(|v| v == op)
    }

    pub fn position(&self, op: &str) -> Option<usize> {
        self.0.iter().position(|v| v == op)
    }
}

impl fmt::Display for SequentialPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" -> "))
    }
}

impl PipelineDag {
    pub fn chain(names: &[&str]) -> Self {
        PipelineDag {
            name: String::new(),
            operations: names.iter().map(|s| s.to_string()).collect(),
            edges: names.windows(2).map(|w| Edge::new(w[0], w[1])).collect(),
            branching: vec![],
            branch_predicates: vec![],
            fanout_rules: vec![],
        }
    }

    /// SHA-256 of the canonical JSON encoding; keys the decomposed-path cache.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("dag serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn successors(&self, v: &str) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .edges
            .iter()
            .filter(|e| e.from == v)
            .map(|e| e.to.as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn predecessors(&self, v: &str) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .edges
            .iter()
            .filter(|e| e.to == v)
            .map(|e| e.from.as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn predicate(&self, from: &str, to: &str) -> Option<&BranchPredicate> {
        self.branch_predicates
            .iter()
            .find(|p| p.from == from && p.to == to)
    }

    pub fn fanout(&self, from: &str, to: &str) -> Option<&FanoutRule> {
        self.fanout_rules.iter().find(|r| r.from == from && r.to == to)
    }
}

/// Checks every structural invariant of `dag`; an empty report means valid.
pub fn validate_dag(dag: &PipelineDag) -> Vec<Violation> {
    let mut report = Vec::new();
    if dag.operations.is_empty() {
        report.push(Violation::Empty);
        return report;
    }
    let mut vertices = BTreeSet::new();
    for v in &dag.operations {
        if !vertices.insert(v.as_str()) {
            report.push(Violation::DuplicateVertex(v.clone()));
        }
    }

    let mut edges = BTreeSet::new();
    for e in &dag.edges {
        let mut known = true;
        for end in [&e.from, &e.to] {
            if !vertices.contains(end.as_str()) {
                report.push(Violation::UnknownVertex {
                    edge: e.clone(),
                    vertex: end.clone(),
                });
                known = false;
            }
        }
        if known && !edges.insert(e.clone()) {
            report.push(Violation::DuplicateEdge(e.clone()));
        }
    }

    // Kahn's algorithm; whatever cannot be peeled off lies on or behind a cycle.
    let mut indegree: BTreeMap<&str, usize> = vertices.iter().map(|v| (*v, 0)).collect();
    for e in &edges {
        *indegree.get_mut(e.to.as_str()).unwrap() += 1;
    }
    if !indegree.values().any(|&d| d == 0) {
        report.push(Violation::NoInputVertex);
    }
    if !vertices
        .iter()
        .any(|v| !edges.iter().any(|e| e.from == *v))
    {
        report.push(Violation::NoOutputVertex);
    }
    let mut remaining = indegree.clone();
    let mut ready: Vec<&str> = remaining
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(v, _)| *v)
        .collect();
    while let Some(v) = ready.pop() {
        remaining.remove(v);
        for e in edges.iter().filter(|e| e.from == v) {
            if let Some(d) = remaining.get_mut(e.to.as_str()) {
                *d -= 1;
                if *d == 0 {
                    ready.push(e.to.as_str());
                }
            }
        }
    }
    if !remaining.is_empty() {
        report.push(Violation::Cycle(
            remaining.keys().map(|v| v.to_string()).collect(),
        ));
    }

    let branching: BTreeSet<&str> = dag.branching.iter().map(String::as_str).collect();
    for b in &branching {
        if !vertices.contains(b) {
            report.push(Violation::UnknownBranchingVertex(b.to_string()));
        }
    }
    let mut guarded = BTreeSet::new();
    for p in &dag.branch_predicates {
        let e = Edge::new(&p.from, &p.to);
        if !edges.contains(&e) {
            report.push(Violation::PredicateWithoutEdge(e));
            continue;
        }
        if !branching.contains(p.from.as_str()) {
            report.push(Violation::PredicateOnNonBranching(e.clone()));
        }
        if !guarded.insert(e.clone()) {
            report.push(Violation::DuplicatePredicate(e));
        }
    }

    let mut fanned = BTreeSet::new();
    for r in &dag.fanout_rules {
        let e = Edge::new(&r.from, &r.to);
        if !edges.contains(&e) {
            report.push(Violation::FanoutWithoutEdge(e));
            continue;
        }
        if !fanned.insert(e.clone()) {
            report.push(Violation::DuplicateFanout(e));
        }
    }
    // joins reachable from a fan-out edge (only meaningful on acyclic graphs)
    if remaining.is_empty() {
        for e in &fanned {
            let mut stack = vec![e.to.as_str()];
            let mut seen = BTreeSet::new();
            while let Some(v) = stack.pop() {
                if !seen.insert(v) {
                    continue;
                }
                if indegree.get(v).copied().unwrap_or(0) > 1 {
                    report.push(Violation::FanoutIntoJoin {
                        edge: e.clone(),
                        join: v.to_string(),
                    });
                    break;
                }
                stack.extend(edges.iter().filter(|x| x.from == v).map(|x| x.to.as_str()));
            }
        }
    }
    report
}

/// Enumerates every input-to-output path with a depth-first walk that visits
/// input vertices and successors in lexicographic order; the result is sorted.
pub fn decompose_paths(dag: &PipelineDag) -> Result<Vec<SequentialPath>, PipelineError> {
    let report = validate_dag(dag);
    if !report.is_empty() {
        return Err(PipelineError::InvalidDag(report));
    }
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut has_pred = BTreeSet::new();
    for e in &dag.edges {
        succ.entry(e.from.as_str()).or_default().push(e.to.as_str());
        has_pred.insert(e.to.as_str());
    }
    for s in succ.values_mut() {
        s.sort_unstable();
    }
    let mut inputs: Vec<&str> = dag
        .operations
        .iter()
        .map(String::as_str)
        .filter(|v| !has_pred.contains(v))
        .collect();
    inputs.sort_unstable();

    let mut paths = Vec::new();
    for input in inputs {
        // explicit stack of (vertex, next successor index)
        let mut stack: Vec<(&str, usize)> = vec![(input, 0)];
        while let Some((v, i)) = stack.last().copied() {
            let next = succ.get(v).and_then(|s| s.get(i)).copied();
            match next {
                _ if i == 0 && !succ.contains_key(v) => {
                    paths.push(SequentialPath(
                        stack.iter().map(|(x, _)| x.to_string()).collect(),
                    ));
                    stack.pop();
                }
                Some(w) => {
                    stack.last_mut().unwrap().1 += 1;
                    stack.push((w, 0));
                }
                None => {
                    stack.pop();
                }
            }
        }
    }
    paths.sort();
    Ok(paths)
}
