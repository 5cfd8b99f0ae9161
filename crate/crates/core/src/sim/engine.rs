use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use ordered_float::OrderedFloat;

use super::model::{Outcome, Sampler};
use super::{invocation_cost, BackendSpec, SimError};
use crate::pipeline::{Attributes, ConfigEntry};

/// Work handed to a backend.
#[derive(Clone, Debug)]
pub struct Job {
    pub id: u64,
    pub operation: String,
    pub config: ConfigEntry,
    pub items: Vec<Attributes>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Started { instance: usize },
    Queued,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Complete,
    Fail,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub id: u64,
    pub backend: String,
    pub instance: usize,
    pub start: f64,
    pub latency: f64,
    pub cost: f64,
    pub outcome: Outcome,
}

/// A job that left a start queue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Started {
    pub id: u64,
    pub time: f64,
    pub instance: usize,
}

struct Running {
    job: Job,
    instance: usize,
    start: f64,
    latency: f64,
    outcome: Outcome,
}

struct Pool {
    spec: BackendSpec,
    used: Vec<u64>,
    queue: VecDeque<Job>,
}

impl Pool {
    fn first_fit(&self, r: u64) -> Option<usize> {
        self.used
            .iter()
            .position(|u| u + r <= self.spec.resources_per_instance)
    }
}

/// Virtual-time executor. Each backend admits jobs strictly first-come
/// first-served: a job that does not fit blocks everything behind it.
pub struct Simulator {
    now: f64,
    pools: BTreeMap<String, Pool>,
    sampler: Sampler,
    dispatch_overhead: f64,
    heap: BinaryHeap<Reverse<(OrderedFloat<f64>, u64)>>,
    running: BTreeMap<u64, Running>,
    seq: u64,
    started: Vec<Started>,
    total_cost: f64,
    trace: Option<String>,
}

impl Simulator {
    pub fn new(backends: Vec<BackendSpec>, sampler: Sampler) -> Result<Self, SimError> {
        let mut pools = BTreeMap::new();
        for spec in backends {
            spec.validate()?;
            let kind = spec.kind.clone();
            let used = vec![0; spec.instance_count as usize];
            if pools
                .insert(
                    kind.clone(),
                    Pool {
                        spec,
                        used,
                        queue: VecDeque::new(),
                    },
                )
                .is_some()
            {
                return Err(SimError::InvalidBackend {
                    kind,
                    reason: "declared twice".into(),
                });
            }
        }
        Ok(Simulator {
            now: 0.0,
            pools,
            sampler,
            dispatch_overhead: 0.0,
            heap: BinaryHeap::new(),
            running: BTreeMap::new(),
            seq: 0,
            started: Vec::new(),
            total_cost: 0.0,
            trace: None,
        })
    }

    /// Constant delay between a start decision and execution.
    pub fn with_dispatch_overhead(mut self, seconds: f64) -> Self {
        self.dispatch_overhead = seconds.max(0.0);
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(String::from("virtual_time\tevent_kind\tinvocation_id\tbackend\tinstance\n"));
        self
    }

    pub fn trace_tsv(&self) -> Option<&str> {
        self.trace.as_deref()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    pub fn backend(&self, kind: &str) -> Option<&BackendSpec> {
        self.pools.get(kind).map(|p| &p.spec)
    }

    pub fn backends(&self) -> impl Iterator<Item = &BackendSpec> {
        self.pools.values().map(|p| &p.spec)
    }

    pub fn queued_len(&self, kind: &str) -> usize {
        self.pools.get(kind).map_or(0, |p| p.queue.len())
    }

    pub fn running_len(&self) -> usize {
        self.running.len()
    }

    pub fn occupied(&self, kind: &str) -> &[u64] {
        self.pools.get(kind).map_or(&[], |p| &p.used)
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_empty() && self.pools.values().all(|p| p.queue.is_empty())
    }

    /// Jobs started since the last call, in start order.
    pub fn drain_started(&mut self) -> Vec<Started> {
        std::mem::take(&mut self.started)
    }

    fn log(&mut self, kind: &str, id: u64, backend: &str, instance: Option<usize>) {
        if let Some(t) = &mut self.trace {
            let inst = instance.map_or_else(|| "-".to_string(), |i| i.to_string());
            let _ = writeln!(t, "{:.6}\t{kind}\t{id}\t{backend}\t{inst}", self.now);
        }
    }

    pub fn submit(&mut self, job: Job) -> Result<Admission, SimError> {
        let kind = job.config.backend_kind.clone();
        if self
            .sampler
            .model()
            .op(&job.operation)?
            .base_latency(&job.config)
            .is_none()
        {
            return Err(SimError::UnsupportedKind {
                operation: job.operation.clone(),
                kind,
            });
        }
        let pool = self
            .pools
            .get_mut(&kind)
            .ok_or_else(|| SimError::UnknownBackend(kind.clone()))?;
        let r = job.config.resource_request;
        if !pool.spec.fits(r) {
            return Err(SimError::Oversized {
                kind,
                request: r,
                capacity: pool.spec.resources_per_instance,
            });
        }
        let slot = if pool.queue.is_empty() {
            pool.first_fit(r)
        } else {
            None
        };
        match slot {
            Some(instance) => {
                self.start(job, instance)?;
                Ok(Admission::Started { instance })
            }
            None => {
                let id = job.id;
                pool.queue.push_back(job);
                self.log("queue", id, &kind, None);
                Ok(Admission::Queued)
            }
        }
    }

    fn start(&mut self, job: Job, instance: usize) -> Result<(), SimError> {
        let draw = self
            .sampler
            .draw_actual_latency(&job.operation, &job.config, &job.items)?;
        let kind = job.config.backend_kind.clone();
        self.pools.get_mut(&kind).expect("pool exists").used[instance] += job.config.resource_request;
        let start = self.now + self.dispatch_overhead;
        let finish = start + draw.latency;
        self.seq += 1;
        self.heap.push(Reverse((OrderedFloat(finish), self.seq)));
        let id = job.id;
        self.started.push(Started {
            id,
            time: self.now,
            instance,
        });
        self.running.insert(
            self.seq,
            Running {
                job,
                instance,
                start,
                latency: draw.latency,
                outcome: draw.outcome,
            },
        );
        self.log("start", id, &kind, Some(instance));
        Ok(())
    }

    pub fn next_event_time(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse((t, _))| t.0)
    }

    /// Moves the clock forward without processing events; `t` may not pass
    /// the next pending event.
    pub fn advance_clock(&mut self, t: f64) -> Result<(), SimError> {
        let limit = self.next_event_time().unwrap_or(f64::INFINITY);
        if t < self.now || t > limit {
            return Err(SimError::ClockOrder { now: self.now, to: t });
        }
        self.now = t;
        Ok(())
    }

    /// Pops the earliest completion or failure, releases its resources and
    /// starts whatever the freed capacity admits. Returns `None` when nothing
    /// is running.
    pub fn advance(&mut self) -> Option<SimEvent> {
        let Reverse((t, seq)) = self.heap.pop()?;
        self.now = t.0;
        let run = self.running.remove(&seq).expect("heap entry is running");
        let kind = run.job.config.backend_kind.clone();
        let cost = {
            let pool = self.pools.get_mut(&kind).expect("pool exists");
            pool.used[run.instance] -= run.job.config.resource_request;
            invocation_cost(&run.job.config, run.latency, &pool.spec)
        };
        self.total_cost += cost;
        let ev_kind = if run.outcome == Outcome::Failure {
            EventKind::Fail
        } else {
            EventKind::Complete
        };
        self.log(
            if ev_kind == EventKind::Fail { "fail" } else { "complete" },
            run.job.id,
            &kind,
            Some(run.instance),
        );
        self.admit(&kind);
        Some(SimEvent {
            time: self.now,
            kind: ev_kind,
            id: run.job.id,
            backend: kind,
            instance: run.instance,
            start: run.start,
            latency: run.latency,
            cost,
            outcome: run.outcome,
        })
    }

    fn admit(&mut self, kind: &str) {
        loop {
            let pool = self.pools.get_mut(kind).expect("pool exists");
            let Some(front) = pool.queue.front() else { break };
            let Some(instance) = pool.first_fit(front.config.resource_request) else {
                break;
            };
            let job = pool.queue.pop_front().expect("front exists");
            // the operation was validated at submit time, so the draw cannot fail
            self.start(job, instance).expect("queued job starts");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::test_entry;
    use crate::sim::{FaultPolicy, GroundTruthModel, KindLatency, OpLatencyModel};

    fn sim(cpu_cores: u64, gpu_mb: u64) -> Simulator {
        let mut kinds = BTreeMap::new();
        kinds.insert("cpu".to_string(), KindLatency::flat(5.0));
        kinds.insert("gpu".to_string(), KindLatency::flat(5.0));
        let model = GroundTruthModel {
            operations: [(
                "op".to_string(),
                OpLatencyModel {
                    kinds,
                    item_attribute: None,
                },
            )]
            .into_iter()
            .collect(),
            policy: FaultPolicy::default(),
        };
        Simulator::new(
            vec![
                BackendSpec {
                    kind: "cpu".into(),
                    instance_count: 1,
                    resources_per_instance: cpu_cores,
                    price_rate: 0.001,
                },
                BackendSpec {
                    kind: "gpu".into(),
                    instance_count: 1,
                    resources_per_instance: gpu_mb,
                    price_rate: 1e-6,
                },
            ],
            Sampler::new(model, 0).unwrap(),
        )
        .unwrap()
    }

    fn job(id: u64, kind: &str, r: u64) -> Job {
        Job {
            id,
            operation: "op".into(),
            config: test_entry(kind, r, 1, 1.0),
            items: vec![Attributes::new()],
        }
    }

    #[test]
    fn idle_instance_starts_now() {
        let mut s = sim(64, 16384);
        assert_eq!(s.submit(job(1, "cpu", 4)).unwrap(), Admission::Started { instance: 0 });
        assert_eq!(s.occupied("cpu"), &[4]);
    }

    #[test]
    fn full_instance_queues() {
        let mut s = sim(64, 16384);
        s.submit(job(1, "cpu", 62)).unwrap();
        assert_eq!(s.submit(job(2, "cpu", 4)).unwrap(), Admission::Queued);
        s.submit(job(3, "gpu", 8192)).unwrap();
        s.submit(job(4, "gpu", 8192)).unwrap();
        assert_eq!(s.submit(job(5, "gpu", 1024)).unwrap(), Admission::Queued);
    }

    #[test]
    fn oversized_request_is_rejected() {
        let mut s = sim(64, 16384);
        assert!(matches!(s.submit(job(1, "cpu", 65)), Err(SimError::Oversized { .. })));
    }

    #[test]
    fn events_in_time_order_and_empty_is_none() {
        let mut s = sim(64, 16384);
        assert!(s.advance().is_none());
        assert_eq!(s.now(), 0.0);
        s.submit(job(1, "cpu", 1)).unwrap();
        s.advance_clock(2.0).unwrap();
        s.submit(job(2, "cpu", 1)).unwrap();
        let a = s.advance().unwrap();
        let b = s.advance().unwrap();
        assert_eq!((a.id, a.time), (1, 5.0));
        assert_eq!((b.id, b.time), (2, 7.0));
    }

    #[test]
    fn completion_admits_queued_at_same_instant() {
        let mut s = sim(64, 16384);
        s.submit(job(1, "cpu", 32)).unwrap();
        s.submit(job(2, "cpu", 32)).unwrap();
        assert_eq!(s.submit(job(3, "cpu", 32)).unwrap(), Admission::Queued);
        s.drain_started();
        let ev = s.advance().unwrap();
        assert_eq!(ev.time, 5.0);
        let started = s.drain_started();
        assert_eq!(started, vec![Started { id: 3, time: 5.0, instance: 0 }]);
        assert_eq!(s.occupied("cpu"), &[64]);
    }

    #[test]
    fn fifo_blocks_without_backfill() {
        let mut s = sim(64, 16384);
        s.submit(job(1, "cpu", 60)).unwrap();
        assert_eq!(s.submit(job(2, "cpu", 8)).unwrap(), Admission::Queued);
        // fits, but must wait behind job 2
        assert_eq!(s.submit(job(3, "cpu", 2)).unwrap(), Admission::Queued);
    }

    #[test]
    fn cost_accumulates_per_event() {
        let mut s = sim(64, 16384);
        s.submit(job(1, "cpu", 2)).unwrap();
        s.submit(job(2, "gpu", 1000)).unwrap();
        let mut sum = 0.0;
        while let Some(ev) = s.advance() {
            sum += ev.cost;
        }
        assert!((sum - s.total_cost()).abs() < 1e-15);
        assert!((sum - (2.0 * 5.0 * 0.001 + 1000.0 * 5.0 * 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn trace_has_one_line_per_event() {
        let mut s = sim(64, 16384).with_trace();
        s.submit(job(1, "cpu", 64)).unwrap();
        s.submit(job(2, "cpu", 64)).unwrap();
        while s.advance().is_some() {}
        let t = s.trace_tsv().unwrap();
        let kinds: Vec<&str> = t.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap()).collect();
        assert_eq!(kinds, ["start", "queue", "complete", "start", "complete"]);
    }
}
