use std::collections::{BTreeMap, VecDeque};

/// A queued invocation with its provisional or final configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub id: u64,
    /// Operation index.
    pub op: usize,
    /// Entry index in the operation's spec.
    pub config: usize,
    pub slack: f64,
    pub enqueued: f64,
    /// Forced reference invocation during warm-up.
    pub warmup: bool,
}

/// Unbounded per-backend queue of speculated invocations. Entries are kept
/// per operation in arrival order so that commit can compare the oldest
/// invocation of each operation.
#[derive(Clone, Debug, Default)]
pub struct SpeculativeQueue {
    per_op: BTreeMap<usize, VecDeque<QueueEntry>>,
    len: usize,
}

impl SpeculativeQueue {
    pub fn push(&mut self, e: QueueEntry) {
        let q = self.per_op.entry(e.op).or_default();
        // retries can carry an older id than what is queued; keep id order
        let at = q.iter().rposition(|x| x.id < e.id).map_or(0, |i| i + 1);
        q.insert(at, e);
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Oldest entry of every operation with queued work.
    pub fn heads(&self) -> impl Iterator<Item = &QueueEntry> {
        self.per_op.values().filter_map(|q| q.front())
    }

    pub fn pop_head(&mut self, op: usize) -> Option<QueueEntry> {
        let q = self.per_op.get_mut(&op)?;
        let e = q.pop_front();
        if q.is_empty() {
            self.per_op.remove(&op);
        }
        if e.is_some() {
            self.len -= 1;
        }
        e
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.per_op.values().flatten()
    }
}

/// Bounded per-backend queue of committed invocations waiting for capacity.
#[derive(Clone, Debug)]
pub struct CommitQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl CommitQueue {
    pub fn new(capacity: usize) -> Self {
        CommitQueue {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_room(&self) -> bool {
        self.entries.len() < self.capacity
    }

    /// Returns the entry back when the queue is full.
    pub fn push(&mut self, e: QueueEntry) -> Result<(), QueueEntry> {
        if self.has_room() {
            self.entries.push_back(e);
            Ok(())
        } else {
            Err(e)
        }
    }

    pub fn remove(&mut self, id: u64) -> Option<QueueEntry> {
        let i = self.entries.iter().position(|e| e.id == id)?;
        self.entries.remove(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(id: u64, op: usize) -> QueueEntry {
        QueueEntry {
            id,
            op,
            config: 0,
            slack: 1.0,
            enqueued: 0.0,
            warmup: false,
        }
    }

    #[test]
    fn heads_are_oldest_per_op() {
        let mut q = SpeculativeQueue::default();
        for (id, op) in [(3, 0), (1, 1), (5, 0), (2, 0)] {
            q.push(e(id, op));
        }
        let heads: Vec<u64> = q.heads().map(|x| x.id).collect();
        assert_eq!(heads, [2, 1]);
        assert_eq!(q.pop_head(0).unwrap().id, 2);
        assert_eq!(q.pop_head(0).unwrap().id, 3);
        assert_eq!(q.len(), 2);
        assert_eq!(q.pop_head(1).unwrap().id, 1);
        assert_eq!(q.heads().count(), 1);
    }

    #[test]
    fn commit_queue_is_bounded() {
        let mut q = CommitQueue::new(2);
        q.push(e(1, 0)).unwrap();
        q.push(e(2, 0)).unwrap();
        assert_eq!(q.push(e(3, 0)).unwrap_err().id, 3);
        assert_eq!(q.remove(1).unwrap().id, 1);
        assert!(q.has_room());
        assert!(q.remove(9).is_none());
    }
}
