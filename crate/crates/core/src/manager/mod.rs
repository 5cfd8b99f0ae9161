//! Run orchestration: invocation generation, speculation and commit, feedback,
//! straggler and failure handling.

mod feedback;
mod report;
mod workload;

pub use feedback::{apply_feedback, FeedbackStore};
pub use report::{InvocationRecord, OverheadStats, RunReport, CSV_HEADER};
pub use workload::{read_trace, write_trace, TraceError, TraceRecord};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use ordered_float::OrderedFloat;
use thiserror::Error;

use crate::configurator::{
    affinity, backend_views, default_cq_capacity, select_config, slack_from_paths, BackendView,
    Backends, BatchingState, CommitQueue, ConfigError, Decision, QueueEntry, Selection, Slacks,
    SpeculativeQueue, Techniques, TuningParams,
};
use crate::pipeline::{
    validate_dag, Attributes, BranchPredicate, ConfigSpec, PipelineDag, PipelineError,
    SequentialPath,
};
use crate::sim::{
    Admission, BackendSpec, EventKind, GroundTruthModel, Job, Sampler, SimError, SimEvent,
    Simulator,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("operation {0} has not been profiled")]
    MissingProfile(String),
    #[error("operation {0} is not on any decomposed path")]
    Unreachable(String),
    #[error("invalid target {0}")]
    InvalidTarget(f64),
    #[error("no backend for the reference configuration of {0}")]
    NoReferenceBackend(String),
    #[error("run stalled at t={time:.3}s with work outstanding: {detail}")]
    Livelock { time: f64, detail: String },
    #[error("event budget of {0} exhausted")]
    EventBudget(u64),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub run_id: String,
    /// End-to-end latency target in seconds; 0 asks for the fastest run and
    /// infinity for the cheapest.
    pub target: f64,
    pub params: TuningParams,
    pub techniques: Techniques,
    pub seed: u64,
    /// Constant delay added before every execution.
    pub dispatch_overhead: f64,
    pub event_trace: bool,
    pub decision_log: bool,
    pub max_events: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            target: f64::INFINITY,
            params: TuningParams::default(),
            techniques: Techniques::default(),
            seed: 0,
            dispatch_overhead: 0.0,
            event_trace: false,
            decision_log: false,
            max_events: 50_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvocationState {
    Speculated,
    Committed,
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug)]
struct Invocation {
    op: usize,
    items: Vec<usize>,
    config: usize,
    backend: usize,
    slack: f64,
    warmup: bool,
    attempt: u32,
    state: InvocationState,
    commit_time: f64,
    start_time: f64,
    expected_finish: f64,
    committed_latency: f64,
    duplicated: bool,
    queued_work: i128,
}

#[derive(Clone, Debug)]
struct Item {
    frame: usize,
    lineage: Vec<u32>,
    op: usize,
    done: bool,
    /// Live copies: waiting in a ready buffer or inside an unfinished invocation.
    copies: u32,
}

#[derive(Clone, Debug)]
struct Ready {
    item: usize,
    since: f64,
    /// Slack per backend when the item became ready.
    slack: Vec<f64>,
    attempt: u32,
}

#[derive(Clone, Debug)]
struct Succ {
    op: usize,
    predicate: Option<BranchPredicate>,
    fanout: Option<String>,
}

struct Op {
    name: String,
    spec: ConfigSpec,
    /// Entry latencies at the start of the run, before feedback.
    baseline: Vec<f64>,
    reference: usize,
    entry_backend: Vec<Option<usize>>,
    preds: Vec<usize>,
    succs: Vec<Succ>,
    depth: usize,
    /// For each path through the op, the ops from it to the path's end.
    suffixes: Vec<Vec<usize>>,
    ready: VecDeque<Ready>,
    /// Items that reached the op and are not done yet.
    outstanding: usize,
    warmup_outstanding: u32,
    running_finish: BTreeMap<OrderedFloat<f64>, u32>,
    flush_at: Option<f64>,
    force_flush: bool,
    joins: HashMap<(usize, Vec<u32>), u32>,
}

struct Backend {
    kind: String,
    view: BackendView,
    sq: SpeculativeQueue,
    cq: CommitQueue,
    /// Queued work (latency times resource) in [`WORK_SCALE`] units.
    load: i128,
}

struct Frame {
    id: u64,
    attrs: Arc<Attributes>,
    /// Arrivals each op waits for before an item of this frame is ready.
    expected: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Timer {
    Straggler(u64),
    Flush(usize),
}

/// A single pipeline run over a simulated backend set.
pub struct Engine {
    cfg: RunConfig,
    ops: Vec<Op>,
    backends: Vec<Backend>,
    views: Backends,
    sim: Simulator,
    frames: Vec<Frame>,
    items: Vec<Item>,
    invs: Vec<Invocation>,
    timers: BinaryHeap<Reverse<(OrderedFloat<f64>, u64, Timer)>>,
    timer_seq: u64,
    feedback: FeedbackStore,
    records: Vec<InvocationRecord>,
    terminal: BTreeMap<u64, u64>,
    last_completion: f64,
    failures: u64,
    duplicates: u64,
    speculate_ns: Vec<u64>,
    commit_ns: Vec<u64>,
    decision_log: Option<String>,
    dirty: BTreeSet<usize>,
}

const WORK_SCALE: f64 = 1e6;

fn elapsed_ns(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

impl Engine {
    pub fn new(
        dag: &PipelineDag,
        paths: &[SequentialPath],
        profiles: &BTreeMap<String, ConfigSpec>,
        backend_specs: &[BackendSpec],
        model: GroundTruthModel,
        workload: &[TraceRecord],
        cfg: RunConfig,
    ) -> Result<Self, RunError> {
        let report = validate_dag(dag);
        if !report.is_empty() {
            return Err(PipelineError::InvalidDag(report).into());
        }
        cfg.params.validate()?;
        if cfg.target.is_nan() || cfg.target < 0.0 {
            return Err(RunError::InvalidTarget(cfg.target));
        }
        let index: BTreeMap<&str, usize> = dag
            .operations
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let kind_index: BTreeMap<&str, usize> = backend_specs
            .iter()
            .enumerate()
            .map(|(i, b)| (b.kind.as_str(), i))
            .collect();

        let mut ops = Vec::with_capacity(dag.operations.len());
        for name in &dag.operations {
            let spec = profiles
                .get(name)
                .ok_or_else(|| RunError::MissingProfile(name.clone()))?
                .clone();
            spec.validate()?;
            let reference = spec
                .entries
                .iter()
                .position(|e| e.config_id == spec.reference)
                .expect("validated spec has its reference");
            let entry_backend: Vec<Option<usize>> = spec
                .entries
                .iter()
                .map(|e| {
                    let b = *kind_index.get(e.backend_kind.as_str())?;
                    (e.schedulable && backend_specs[b].fits(e.resource_request)).then_some(b)
                })
                .collect();
            if entry_backend[reference].is_none() {
                return Err(RunError::NoReferenceBackend(name.clone()));
            }
            let mut suffixes = Vec::new();
            for p in paths.iter().filter(|p| p.contains(name)) {
                let at = p.position(name).expect("contains");
                suffixes.push(p.0[at..].iter().map(|v| index[v.as_str()]).collect());
            }
            if suffixes.is_empty() {
                return Err(RunError::Unreachable(name.clone()));
            }
            ops.push(Op {
                name: name.clone(),
                baseline: spec.entries.iter().map(|e| e.profiled_latency).collect(),
                spec,
                reference,
                entry_backend,
                preds: dag.predecessors(name).iter().map(|p| index[p]).collect(),
                succs: dag
                    .successors(name)
                    .iter()
                    .map(|s| Succ {
                        op: index[s],
                        predicate: dag.predicate(name, s).cloned(),
                        fanout: dag.fanout(name, s).map(|r| r.attribute.clone()),
                    })
                    .collect(),
                depth: 0,
                suffixes,
                ready: VecDeque::new(),
                outstanding: 0,
                warmup_outstanding: 0,
                running_finish: BTreeMap::new(),
                flush_at: None,
                force_flush: false,
                joins: HashMap::new(),
            });
        }
        let order = topo_order(&ops);
        for &v in &order {
            let d = ops[v].preds.iter().map(|&p| ops[p].depth + 1).max().unwrap_or(0);
            ops[v].depth = d;
        }

        let cq_for = |b: &BackendSpec| {
            cfg.params
                .cq_capacity
                .unwrap_or_else(|| default_cq_capacity(b, ops.iter().map(|o| &o.spec)))
        };
        let views = backend_views(backend_specs);
        let backends = backend_specs
            .iter()
            .map(|b| Backend {
                kind: b.kind.clone(),
                view: views[&b.kind].clone(),
                sq: SpeculativeQueue::default(),
                cq: CommitQueue::new(cq_for(b)),
                load: 0,
            })
            .collect();

        let mut sim = Simulator::new(backend_specs.to_vec(), Sampler::new(model, cfg.seed)?)?
            .with_dispatch_overhead(cfg.dispatch_overhead);
        if cfg.event_trace {
            sim = sim.with_trace();
        }

        let frames = workload
            .iter()
            .map(|r| {
                let attrs = Arc::new(r.attributes.clone());
                let expected = expected_arrivals(&ops, &order, &attrs);
                Frame {
                    id: r.frame_id,
                    attrs,
                    expected,
                }
            })
            .collect();

        let feedback = FeedbackStore::new(ops.iter().map(|o| o.spec.entries.len()));
        let decision_log = cfg.decision_log.then(|| {
            String::from("virtual_time\tphase\tinvocation_id\toperation\tslack\tconfig_id\tobjective\n")
        });
        Ok(Engine {
            cfg,
            ops,
            backends,
            views,
            sim,
            frames,
            items: Vec::new(),
            invs: Vec::new(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            feedback,
            records: Vec::new(),
            terminal: BTreeMap::new(),
            last_completion: 0.0,
            failures: 0,
            duplicates: 0,
            speculate_ns: Vec::new(),
            commit_ns: Vec::new(),
            decision_log,
            dirty: BTreeSet::new(),
        })
    }

    fn now(&self) -> f64 {
        self.sim.now()
    }

    // ---- slack and queueing -------------------------------------------

    fn queueing(&self, b: usize) -> f64 {
        let be = &self.backends[b];
        be.load as f64 / WORK_SCALE / be.view.r_total
    }

    fn slack_on(&self, op: usize, b: usize) -> f64 {
        let o = &self.ops[op];
        let ref_l = |v: usize| {
            let s = &self.ops[v];
            s.spec.entries[s.reference].profiled_latency
        };
        let remaining = o
            .suffixes
            .iter()
            .map(|sfx| sfx.iter().map(|&v| ref_l(v)).sum::<f64>());
        slack_from_paths(ref_l(op), remaining, self.cfg.target, self.now(), self.queueing(b))
            .expect("every op has a path")
    }

    fn slack_vec(&self, op: usize) -> Vec<f64> {
        (0..self.backends.len()).map(|b| self.slack_on(op, b)).collect()
    }

    fn slacks(&self, op: usize) -> Slacks {
        self.backends
            .iter()
            .enumerate()
            .map(|(b, be)| (be.kind.clone(), self.slack_on(op, b)))
            .collect()
    }

    /// Counts a queued invocation's work with the latency estimate it was
    /// queued under, so later feedback does not rescale the whole backlog.
    fn load_add(&mut self, b: usize, id: u64) {
        let inv = &self.invs[id as usize];
        let x = &self.ops[inv.op].spec.entries[inv.config];
        let w = (x.profiled_latency * x.resource_request as f64 * WORK_SCALE).round() as i128;
        self.invs[id as usize].queued_work = w;
        self.backends[b].load += w;
    }

    fn load_remove(&mut self, b: usize, id: u64) {
        self.backends[b].load -= self.invs[id as usize].queued_work;
    }

    fn log_decision(&mut self, phase: &str, id: u64, op: usize, slack: f64, entry: usize, obj: f64) {
        if let Some(log) = &mut self.decision_log {
            let o = &self.ops[op];
            let _ = writeln!(
                log,
                "{:.6}\t{phase}\t{id}\t{}\t{slack}\t{}\t{obj}",
                self.sim.now(),
                o.name,
                o.spec.entries[entry].config_id
            );
        }
    }

    // ---- items ----------------------------------------------------------

    fn in_warmup(&self, op: usize) -> bool {
        let o = &self.ops[op];
        self.cfg.techniques.dfp
            && self.feedback.reference_completions[op] + o.warmup_outstanding < self.cfg.params.dfp_count
    }

    fn make_ready(&mut self, item: usize, attempt: u32, front: bool) {
        let op = self.items[item].op;
        let r = Ready {
            item,
            since: self.now(),
            slack: self.slack_vec(op),
            attempt,
        };
        self.items[item].copies += 1;
        let q = &mut self.ops[op].ready;
        if front {
            q.push_front(r);
        } else {
            q.push_back(r);
        }
        self.dirty.insert(op);
    }

    fn deliver(&mut self, op: usize, frame: usize, lineage: Vec<u32>) {
        let expected = self.frames[frame].expected[op];
        if expected > 1 {
            let key = (frame, lineage);
            let n = self.ops[op].joins.entry(key.clone()).or_insert(0);
            *n += 1;
            if *n < expected {
                return;
            }
            self.ops[op].joins.remove(&key);
            self.spawn_item(op, frame, key.1);
        } else {
            self.spawn_item(op, frame, lineage);
        }
    }

    fn spawn_item(&mut self, op: usize, frame: usize, lineage: Vec<u32>) {
        let id = self.items.len();
        self.items.push(Item {
            frame,
            lineage,
            op,
            done: false,
            copies: 0,
        });
        self.ops[op].outstanding += 1;
        self.make_ready(id, 0, false);
    }

    fn finish_item(&mut self, item: usize) {
        let it = &mut self.items[item];
        if it.done {
            return;
        }
        it.done = true;
        let (op, frame, lineage) = (it.op, it.frame, it.lineage.clone());
        self.ops[op].outstanding -= 1;
        self.last_completion = self.now();
        if self.ops[op].succs.is_empty() {
            *self.terminal.entry(self.frames[frame].id).or_insert(0) += 1;
            return;
        }
        let attrs = Arc::clone(&self.frames[frame].attrs);
        for s in self.ops[op].succs.clone() {
            if s.predicate.as_ref().is_some_and(|p| !p.holds(&attrs)) {
                continue;
            }
            match &s.fanout {
                None => self.deliver(s.op, frame, lineage.clone()),
                Some(attr) => {
                    let n = attrs.get(attr).copied().unwrap_or(0).max(0) as u32;
                    for k in 0..n {
                        let mut l = lineage.clone();
                        l.push(k);
                        self.deliver(s.op, frame, l);
                    }
                }
            }
        }
    }

    // ---- speculation ----------------------------------------------------

    fn new_invocation(&mut self, op: usize, taken: Vec<Ready>, config: usize, slack: f64, warmup: bool) -> u64 {
        let id = self.invs.len() as u64;
        let backend = self.ops[op].entry_backend[config].expect("schedulable entry");
        self.invs.push(Invocation {
            op,
            items: taken.iter().map(|r| r.item).collect(),
            config,
            backend,
            slack,
            warmup,
            attempt: taken.iter().map(|r| r.attempt).max().unwrap_or(0),
            state: InvocationState::Speculated,
            commit_time: 0.0,
            start_time: 0.0,
            expected_finish: 0.0,
            committed_latency: 0.0,
            duplicated: false,
            queued_work: 0,
        });
        id
    }

    fn enqueue_sq(&mut self, id: u64) {
        let inv = &self.invs[id as usize];
        let (b, op, e) = (inv.backend, inv.op, inv.config);
        let entry = QueueEntry {
            id,
            op,
            config: e,
            slack: inv.slack,
            enqueued: self.now(),
            warmup: inv.warmup,
        };
        self.backends[b].sq.push(entry);
        self.load_add(b, id);
    }

    fn batching_state(&self, op: usize) -> BatchingState {
        let now = self.now();
        let o = &self.ops[op];
        let upstream_pending = o.preds.iter().map(|&p| self.ops[p].outstanding).sum();
        let mut wait = f64::INFINITY;
        for &p in &o.preds {
            let po = &self.ops[p];
            let w = match po.running_finish.keys().next() {
                Some(t) => (t.0 - now).max(0.0),
                None => po.spec.entries[po.reference].profiled_latency,
            };
            wait = wait.min(w);
        }
        let mut held_margin = Slacks::new();
        for (b, be) in self.backends.iter().enumerate() {
            let m = o
                .ready
                .iter()
                .map(|r| r.slack[b] - (now - r.since))
                .fold(f64::INFINITY, f64::min);
            held_margin.insert(be.kind.clone(), m);
        }
        BatchingState {
            upstream_pending,
            projected_wait: if wait.is_finite() { wait } else { 0.0 },
            held_margin,
        }
    }

    fn take_ready(&mut self, op: usize, n: usize) -> Vec<Ready> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let Some(r) = self.ops[op].ready.pop_front() else { break };
            if self.items[r.item].done {
                // a duplicate whose original already finished
                self.items[r.item].copies -= 1;
                continue;
            }
            out.push(r);
        }
        out
    }

    /// Turns the op's ready inputs into speculated invocations.
    fn speculate(&mut self, op: usize) -> Result<(), RunError> {
        loop {
            if self.ops[op].ready.is_empty() {
                self.ops[op].force_flush = false;
                return Ok(());
            }
            let t0 = Instant::now();
            if self.in_warmup(op) {
                let taken = self.take_ready(op, 1);
                if taken.is_empty() {
                    continue;
                }
                let r = self.ops[op].reference;
                let b = self.ops[op].entry_backend[r].expect("reference is schedulable");
                let slack = self.slack_on(op, b);
                self.ops[op].warmup_outstanding += 1;
                let id = self.new_invocation(op, taken, r, slack, true);
                self.enqueue_sq(id);
                self.speculate_ns.push(elapsed_ns(t0));
                self.log_decision("warmup", id, op, slack, r, f64::NAN);
                continue;
            }
            let slacks = self.slacks(op);
            let available = self.ops[op].ready.len();
            let batching = (self.cfg.techniques.sdb && !self.ops[op].force_flush)
                .then(|| self.batching_state(op));
            let sel = select_config(
                &self.ops[op].spec,
                &slacks,
                &self.views,
                self.cfg.params.alpha,
                available,
                batching.as_ref(),
            )?;
            if sel.decision == Decision::Delay {
                let b = self.ops[op].entry_backend[sel.entry].expect("schedulable");
                let state = batching.expect("delay needs batching state");
                let margin = state.held_margin[&self.backends[b].kind];
                let l = self.ops[op].spec.entries[sel.entry].profiled_latency;
                let at = self.now() + (margin - state.projected_wait - l).max(0.0);
                if at.is_finite() && self.ops[op].flush_at.map_or(true, |f| at < f) {
                    self.ops[op].flush_at = Some(at);
                    self.push_timer(at, Timer::Flush(op));
                }
                self.speculate_ns.push(elapsed_ns(t0));
                return Ok(());
            }
            let b = self.ops[op].spec.entries[sel.entry].batch_size as usize;
            let taken = self.take_ready(op, b);
            if taken.is_empty() {
                continue;
            }
            let id = self.new_invocation(op, taken, sel.entry, sel.slack, false);
            self.enqueue_sq(id);
            self.speculate_ns.push(elapsed_ns(t0));
            self.log_decision("speculate", id, op, sel.slack, sel.entry, sel.score.value);
        }
    }

    // ---- commit -----------------------------------------------------------

    /// Commit priority of a queue head; larger sorts first.
    fn priority(&self, b: usize, e: &QueueEntry, cache: &mut BTreeMap<usize, f64>) -> (bool, usize, OrderedFloat<f64>, OrderedFloat<f64>, Reverse<u64>) {
        let t = &self.cfg.techniques;
        if !t.pbc {
            return (false, 0, OrderedFloat(0.0), OrderedFloat(0.0), Reverse(e.id));
        }
        if e.warmup {
            return (true, self.ops[e.op].depth, OrderedFloat(0.0), OrderedFloat(0.0), Reverse(e.id));
        }
        let aff = *cache.entry(e.op).or_insert_with(|| {
            let slacks = self.slacks(e.op);
            affinity(&self.ops[e.op].spec, &self.backends[b].kind, &slacks, &self.views, self.cfg.params.alpha)
                .unwrap_or(0.0)
        });
        (false, 0, OrderedFloat(aff), OrderedFloat(-e.slack), Reverse(e.id))
    }

    fn pick_head(&self, b: usize) -> Option<QueueEntry> {
        let mut cache = BTreeMap::new();
        self.backends[b]
            .sq
            .heads()
            .map(|e| (self.priority(b, e, &mut cache), e))
            .max_by(|x, y| x.0.cmp(&y.0))
            .map(|(_, e)| e.clone())
    }

    /// Re-decides a queued invocation against the current state, over every
    /// backend or only over `only`.
    fn reselect(&self, id: u64, only: Option<usize>) -> Result<Selection, RunError> {
        let inv = &self.invs[id as usize];
        let op = inv.op;
        let slacks = self.slacks(op);
        let sel = match only {
            None => select_config(&self.ops[op].spec, &slacks, &self.views, self.cfg.params.alpha, inv.items.len(), None)?,
            Some(b) => {
                let be = &self.backends[b];
                let views: Backends = [(be.kind.clone(), be.view.clone())].into_iter().collect();
                select_config(&self.ops[op].spec, &slacks, &views, self.cfg.params.alpha, inv.items.len(), None)?
            }
        };
        Ok(sel)
    }

    /// Hands inputs beyond the chosen entry's batch size back to the ready
    /// buffer.
    fn split_to(&mut self, id: u64, entry: usize) {
        let op = self.invs[id as usize].op;
        let bsz = self.ops[op].spec.entries[entry].batch_size as usize;
        let inv = &mut self.invs[id as usize];
        if bsz < inv.items.len() {
            let rest: Vec<usize> = inv.items.split_off(bsz);
            let attempt = inv.attempt;
            for item in rest.into_iter().rev() {
                // keeps the copy count unchanged
                self.items[item].copies -= 1;
                self.make_ready(item, attempt, true);
            }
        }
    }

    fn commit_to(&mut self, id: u64, entry: usize, slack: f64) -> Result<(), RunError> {
        let now = self.now();
        let op = self.invs[id as usize].op;
        let b = self.ops[op].entry_backend[entry].expect("schedulable");
        let config = self.ops[op].spec.entries[entry].clone();
        {
            let inv = &mut self.invs[id as usize];
            inv.config = entry;
            inv.backend = b;
            inv.slack = slack;
            inv.state = InvocationState::Committed;
            inv.commit_time = now;
            inv.committed_latency = config.profiled_latency;
        }
        let items = self.invs[id as usize]
            .items
            .iter()
            .map(|&i| (*self.frames[self.items[i].frame].attrs).clone())
            .collect();
        let job = Job {
            id,
            operation: self.ops[op].name.clone(),
            config,
            items,
        };
        if self.sim.submit(job)? == Admission::Queued {
            let inv = &self.invs[id as usize];
            let e = QueueEntry {
                id,
                op,
                config: entry,
                slack,
                enqueued: now,
                warmup: inv.warmup,
            };
            self.backends[b]
                .cq
                .push(e)
                .expect("commit checked queue room");
            self.load_add(b, id);
        }
        self.handle_started();
        Ok(())
    }

    fn commit(&mut self, b: usize) -> Result<(), RunError> {
        while self.backends[b].cq.has_room() {
            let Some(head) = self.pick_head(b) else { break };
            let t0 = Instant::now();
            let e = self.backends[b].sq.pop_head(head.op).expect("head exists");
            self.load_remove(b, e.id);
            let id = e.id;
            if e.warmup || !self.cfg.techniques.eslc {
                self.commit_to(id, e.config, e.slack)?;
                self.commit_ns.push(elapsed_ns(t0));
                self.log_decision("commit", id, e.op, e.slack, e.config, f64::NAN);
                continue;
            }
            let mut sel = self.reselect(id, None)?;
            let nb = self.ops[e.op].entry_backend[sel.entry].expect("schedulable");
            if nb != b && !self.backends[nb].cq.has_room() {
                // stay unless this backend can no longer meet the slack
                let here = self.reselect(id, Some(b))?;
                if here.score.meets_slack {
                    sel = here;
                } else {
                    let inv = &mut self.invs[id as usize];
                    inv.config = sel.entry;
                    inv.backend = nb;
                    inv.slack = sel.slack;
                    self.enqueue_sq(id);
                    self.log_decision("move", id, e.op, sel.slack, sel.entry, sel.score.value);
                    self.commit_ns.push(elapsed_ns(t0));
                    continue;
                }
            }
            self.split_to(id, sel.entry);
            self.commit_to(id, sel.entry, sel.slack)?;
            self.log_decision("commit", id, e.op, sel.slack, sel.entry, sel.score.value);
            self.commit_ns.push(elapsed_ns(t0));
        }
        if self.cfg.techniques.eslc && !self.backends[b].cq.has_room() {
            self.spill(b)?;
        }
        Ok(())
    }

    /// With this backend's commit queue full, lets each queued head move to
    /// another backend that has room, if a fresh decision prefers it there.
    fn spill(&mut self, b: usize) -> Result<(), RunError> {
        let others: Vec<usize> = (0..self.backends.len())
            .filter(|&o| o != b && self.backends[o].cq.has_room())
            .collect();
        if others.is_empty() {
            return Ok(());
        }
        let heads: Vec<QueueEntry> = self.backends[b]
            .sq
            .heads()
            .filter(|e| !e.warmup)
            .cloned()
            .collect();
        for head in heads {
            let t0 = Instant::now();
            let sel = self.reselect(head.id, None)?;
            let nb = self.ops[head.op].entry_backend[sel.entry].expect("schedulable");
            if nb != b && self.backends[nb].cq.has_room() {
                self.backends[b].sq.pop_head(head.op).expect("head exists");
                self.load_remove(b, head.id);
                self.split_to(head.id, sel.entry);
                self.commit_to(head.id, sel.entry, sel.slack)?;
                self.log_decision("commit", head.id, head.op, sel.slack, sel.entry, sel.score.value);
            }
            self.commit_ns.push(elapsed_ns(t0));
        }
        Ok(())
    }

    fn decide(&mut self) -> Result<(), RunError> {
        for op in 0..self.ops.len() {
            if !self.ops[op].ready.is_empty() {
                self.dirty.insert(op);
            }
        }
        for _ in 0..1000 {
            let mut order: Vec<usize> = std::mem::take(&mut self.dirty).into_iter().collect();
            // deeper operations first so their inputs reach the queues early
            order.sort_by_key(|&op| Reverse(self.ops[op].depth));
            for op in order {
                self.speculate(op)?;
            }
            for b in 0..self.backends.len() {
                self.commit(b)?;
            }
            // split-off remainders from commit make their op dirty again
            if self.dirty.is_empty() {
                return Ok(());
            }
        }
        Ok(())
    }

    // ---- events -----------------------------------------------------------

    fn push_timer(&mut self, at: f64, t: Timer) {
        self.timer_seq += 1;
        self.timers.push(Reverse((OrderedFloat(at), self.timer_seq, t)));
    }

    fn handle_started(&mut self) {
        for s in self.sim.drain_started() {
            let inv = &mut self.invs[s.id as usize];
            inv.state = InvocationState::Running;
            inv.start_time = s.time;
            inv.expected_finish = s.time + inv.committed_latency;
            let (op, b, fin) = (inv.op, inv.backend, inv.expected_finish);
            let deadline = s.time + self.cfg.params.straggler_factor * inv.committed_latency;
            if self.backends[b].cq.remove(s.id).is_some() {
                self.load_remove(b, s.id);
            }
            *self.ops[op].running_finish.entry(OrderedFloat(fin)).or_insert(0) += 1;
            self.push_timer(deadline, Timer::Straggler(s.id));
        }
    }

    fn stop_running(&mut self, id: u64) {
        let inv = &self.invs[id as usize];
        let (op, fin) = (inv.op, OrderedFloat(inv.expected_finish));
        let m = &mut self.ops[op].running_finish;
        if let Some(n) = m.get_mut(&fin) {
            *n -= 1;
            if *n == 0 {
                m.remove(&fin);
            }
        }
    }

    fn on_event(&mut self, ev: SimEvent) {
        let id = ev.id;
        self.stop_running(id);
        let failed = ev.kind == EventKind::Fail;
        let (op, entry, warmup) = {
            let inv = &mut self.invs[id as usize];
            inv.state = if failed {
                InvocationState::Failed
            } else {
                InvocationState::Completed
            };
            (inv.op, inv.config, inv.warmup)
        };
        if warmup {
            self.ops[op].warmup_outstanding -= 1;
        }
        let inv = self.invs[id as usize].clone();
        let o = &self.ops[op];
        self.records.push(InvocationRecord {
            id,
            operation: o.name.clone(),
            config_id: o.spec.entries[entry].config_id.clone(),
            backend: self.backends[inv.backend].kind.clone(),
            items: inv.items.len(),
            attempt: inv.attempt,
            warmup,
            slack: inv.slack,
            commit_time: inv.commit_time,
            start_time: inv.start_time,
            latency: ev.latency,
            cost: ev.cost,
            failed,
            met_slack: !failed && ev.latency <= inv.slack,
        });
        for &item in &inv.items {
            self.items[item].copies -= 1;
        }
        if failed {
            self.failures += 1;
            for &item in &inv.items {
                let it = &self.items[item];
                if !it.done && it.copies == 0 {
                    self.make_ready(item, inv.attempt + 1, true);
                }
            }
            return;
        }
        let is_ref = entry == self.ops[op].reference;
        let kind = self.ops[op].spec.entries[entry].backend_kind.clone();
        let updated = self.feedback.observe(
            op,
            entry,
            &kind,
            is_ref,
            self.ops[op].baseline[entry],
            ev.latency,
            self.cfg.params.smoothing_beta,
            self.cfg.techniques.fb,
        );
        if let Some(ratio) = updated {
            let o = &mut self.ops[op];
            for (e, base) in o.spec.entries.iter_mut().zip(&o.baseline) {
                if e.backend_kind == kind {
                    e.profiled_latency = base * ratio;
                }
            }
        }
        for &item in &inv.items {
            self.finish_item(item);
        }
    }

    fn on_timer(&mut self, t: Timer) {
        match t {
            Timer::Straggler(id) => {
                let inv = &self.invs[id as usize];
                if inv.state != InvocationState::Running || inv.duplicated {
                    return;
                }
                let pending: Vec<usize> = inv.items.iter().copied().filter(|&i| !self.items[i].done).collect();
                if pending.is_empty() {
                    return;
                }
                let attempt = inv.attempt + 1;
                self.invs[id as usize].duplicated = true;
                self.duplicates += 1;
                for item in pending.into_iter().rev() {
                    self.make_ready(item, attempt, true);
                }
            }
            Timer::Flush(op) => {
                if self.ops[op].flush_at.is_some_and(|f| f <= self.now()) {
                    self.ops[op].flush_at = None;
                    self.ops[op].force_flush = true;
                    self.dirty.insert(op);
                }
            }
        }
    }

    fn outstanding_work(&self) -> Option<String> {
        let ready: usize = self.ops.iter().map(|o| o.ready.len()).sum();
        let sq: usize = self.backends.iter().map(|b| b.sq.len()).sum();
        let cq: usize = self.backends.iter().map(|b| b.cq.len()).sum();
        let joins: usize = self.ops.iter().map(|o| o.joins.len()).sum();
        let running = self.sim.running_len();
        (ready + sq + cq + joins + running > 0).then(|| {
            format!("{ready} ready, {sq} speculated, {cq} committed, {running} running, {joins} partial joins")
        })
    }

    /// Drives the run until no work remains and assembles the report.
    pub fn run(mut self) -> Result<RunOutput, RunError> {
        let wall = Instant::now();
        for f in 0..self.frames.len() {
            for op in 0..self.ops.len() {
                if self.ops[op].preds.is_empty() && self.frames[f].expected[op] > 0 {
                    self.spawn_item(op, f, Vec::new());
                }
            }
        }
        let mut events = 0u64;
        loop {
            self.decide()?;
            events += 1;
            if events > self.cfg.max_events {
                return Err(RunError::EventBudget(self.cfg.max_events));
            }
            let next_sim = self.sim.next_event_time();
            let next_timer = self.timers.peek().map(|Reverse((t, _, _))| t.0);
            match (next_sim, next_timer) {
                (None, None) => {
                    if let Some(detail) = self.outstanding_work() {
                        // last resort: release every batch still being held
                        let held: Vec<usize> = (0..self.ops.len())
                            .filter(|&op| !self.ops[op].ready.is_empty() && !self.ops[op].force_flush)
                            .collect();
                        if held.is_empty() {
                            return Err(RunError::Livelock {
                                time: self.now(),
                                detail,
                            });
                        }
                        for op in held {
                            self.ops[op].force_flush = true;
                            self.dirty.insert(op);
                        }
                        continue;
                    }
                    break;
                }
                (Some(ts), tt) if tt.map_or(true, |tt| ts <= tt) => {
                    let ev = self.sim.advance().expect("event pending");
                    self.on_event(ev);
                    self.handle_started();
                }
                (_, Some(tt)) => {
                    let Reverse((_, _, timer)) = self.timers.pop().expect("timer pending");
                    self.sim.advance_clock(tt.max(self.now()))?;
                    self.on_timer(timer);
                }
                _ => unreachable!(),
            }
        }
        Ok(self.finish(wall))
    }

    fn finish(mut self, wall: Instant) -> RunOutput {
        let latency = if self.frames.is_empty() { 0.0 } else { self.last_completion };
        let target = self.cfg.target;
        let normalized = if target.is_infinite() {
            0.0
        } else if target > 0.0 {
            latency / target
        } else if latency > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let completed: Vec<&InvocationRecord> = self.records.iter().filter(|r| !r.failed).collect();
        let met = completed.iter().filter(|r| r.met_slack).count();
        let slack_met_frac = if completed.is_empty() {
            1.0
        } else {
            met as f64 / completed.len() as f64
        };
        let mut usage = BTreeMap::new();
        for r in &self.records {
            *usage.entry(format!("{}/{}", r.operation, r.config_id)).or_insert(0) += 1;
        }
        let overhead = OverheadStats::from_samples(
            &mut self.speculate_ns,
            &mut self.commit_ns,
            wall.elapsed().as_secs_f64(),
        );
        let mut metadata = BTreeMap::new();
        metadata.insert("alpha".into(), self.cfg.params.alpha.to_string());
        metadata.insert("ablate".into(), self.cfg.techniques.to_string());
        metadata.insert("seed".into(), self.cfg.seed.to_string());
        metadata.insert("dfp_count".into(), self.cfg.params.dfp_count.to_string());
        metadata.insert("beta".into(), self.cfg.params.smoothing_beta.to_string());
        metadata.insert(
            "straggler_factor".into(),
            self.cfg.params.straggler_factor.to_string(),
        );
        let cq: Vec<String> = self
            .backends
            .iter()
            .map(|b| format!("{}={}", b.kind, b.cq.capacity()))
            .collect();
        metadata.insert("cq_capacity".into(), cq.join(","));
        let report = RunReport {
            run_id: self.cfg.run_id.clone(),
            target_s: target,
            latency_s: latency,
            normalized_latency: normalized,
            cost: self.sim.total_cost(),
            slack_met_frac,
            configs_used: usage.len(),
            failures: self.failures,
            duplicates: self.duplicates,
            invocations: self.records.len(),
            config_usage: usage,
            terminal_items: std::mem::take(&mut self.terminal),
            records: std::mem::take(&mut self.records),
            overhead,
            metadata,
        };
        let profiles = self
            .ops
            .iter()
            .map(|o| (o.name.clone(), o.spec.clone()))
            .collect();
        RunOutput {
            report,
            profiles,
            feedback: self.feedback,
            event_trace: self.sim.trace_tsv().map(str::to_string),
            decision_log: self.decision_log,
        }
    }
}

/// Everything a finished run leaves behind.
pub struct RunOutput {
    pub report: RunReport,
    /// Profiles with the latencies smoothed during the run.
    pub profiles: BTreeMap<String, ConfigSpec>,
    pub feedback: FeedbackStore,
    pub event_trace: Option<String>,
    pub decision_log: Option<String>,
}

fn topo_order(ops: &[Op]) -> Vec<usize> {
    let mut indeg: Vec<usize> = ops.iter().map(|o| o.preds.len()).collect();
    let mut ready: VecDeque<usize> = (0..ops.len()).filter(|&v| indeg[v] == 0).collect();
    let mut out = Vec::with_capacity(ops.len());
    while let Some(v) = ready.pop_front() {
        out.push(v);
        for s in &ops[v].succs {
            indeg[s.op] -= 1;
            if indeg[s.op] == 0 {
                ready.push_back(s.op);
            }
        }
    }
    out
}

/// How many arrivals each op receives per item of a frame with `attrs`:
/// predecessors that are reached and whose edge is live.
fn expected_arrivals(ops: &[Op], order: &[usize], attrs: &Attributes) -> Vec<u32> {
    let mut expected = vec![0u32; ops.len()];
    let mut reached = vec![false; ops.len()];
    for &v in order {
        if ops[v].preds.is_empty() {
            reached[v] = true;
            expected[v] = 1;
        }
        if !reached[v] {
            continue;
        }
        for s in &ops[v].succs {
            let live = s.predicate.as_ref().map_or(true, |p| p.holds(attrs))
                && s.fanout
                    .as_ref()
                    .map_or(true, |a| attrs.get(a).copied().unwrap_or(0) > 0);
            if live {
                reached[s.op] = true;
                expected[s.op] += 1;
            }
        }
    }
    expected
}

/// Runs `dag` over `workload` and returns the report.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    dag: &PipelineDag,
    paths: &[SequentialPath],
    profiles: &BTreeMap<String, ConfigSpec>,
    backends: &[BackendSpec],
    model: GroundTruthModel,
    workload: &[TraceRecord],
    cfg: RunConfig,
) -> Result<RunOutput, RunError> {
    Engine::new(dag, paths, profiles, backends, model, workload, cfg)?.run()
}
