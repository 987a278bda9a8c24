//! Per-variable read/write dependency scheduler.
//!
//! Operations declare the variables they read and write. Each variable keeps
//! a FIFO of the pending and running operations that touch it, in submission
//! order. An operation may start when, on every variable it touches:
//!
//! * as a writer, it is at the head of the queue (everything submitted
//!   earlier on that variable has completed);
//! * as a reader, no earlier-submitted writer is still queued.
//!
//! Consecutive readers are therefore released together, and an operation
//! that both reads and writes a variable is scheduled as a writer.
//!
//! The engine has no clock. Callers pass the simulated time into
//! [`DepEngine::start`] and [`DepEngine::complete`] so the engine can keep a
//! trace of when each operation ran.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

/// Submission index. Tickets compare in submission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct OpSpec {
    pub label: String,
    pub reads: BTreeSet<VarId>,
    pub writes: BTreeSet<VarId>,
    /// Simulated run time; the engine only stores it.
    pub duration: f64,
}

impl OpSpec {
    pub fn new(label: impl Into<String>) -> Self {
        OpSpec {
            label: label.into(),
            reads: BTreeSet::new(),
            writes: BTreeSet::new(),
            duration: 0.0,
        }
    }

    pub fn reads(mut self, vars: impl IntoIterator<Item = VarId>) -> Self {
        self.reads.extend(vars);
        self
    }

    pub fn writes(mut self, vars: impl IntoIterator<Item = VarId>) -> Self {
        self.writes.extend(vars);
        self
    }

    pub fn duration(mut self, d: f64) -> Self {
        self.duration = d;
        self
    }

    /// Every variable touched, with its effective access mode.
    fn accesses(&self) -> impl Iterator<Item = (VarId, Access)> + '_ {
        let writes = self.writes.iter().map(|&v| (v, Access::Write));
        let reads = self
            .reads
            .iter()
            .filter(|v| !self.writes.contains(v))
            .map(|&v| (v, Access::Read));
        writes.chain(reads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Pending,
    Running { since: f64 },
}

#[derive(Debug, Clone)]
struct Entry {
    spec: OpSpec,
    status: Status,
}

/// One executed operation, for schedule visualisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub ticket: Ticket,
    pub label: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DepEngine {
    next_seq: u64,
    live: BTreeMap<Ticket, Entry>,
    queues: BTreeMap<VarId, VecDeque<(Ticket, Access)>>,
    completed: u64,
    trace: Vec<TraceEntry>,
    record_trace: bool,
}

impl DepEngine {
    pub fn new() -> Self {
        DepEngine {
            record_trace: true,
            ..Default::default()
        }
    }

    /// An engine that does not keep a trace of finished operations.
    pub fn without_trace() -> Self {
        DepEngine::default()
    }

    pub fn submit(&mut self, op: OpSpec) -> Ticket {
        let ticket = Ticket(self.next_seq);
        self.next_seq += 1;
        for (var, access) in op.accesses() {
            self.queues
                .entry(var)
                .or_default()
                .push_back((ticket, access));
        }
        self.live.insert(
            ticket,
            Entry {
                spec: op,
                status: Status::Pending,
            },
        );
        ticket
    }

    fn hazards_clear(&self, ticket: Ticket, spec: &OpSpec) -> bool {
        spec.accesses().all(|(var, access)| {
            let queue = &self.queues[&var];
            let mut earlier = queue.iter().take_while(|(t, _)| *t != ticket);
            match access {
                Access::Write => earlier.next().is_none(),
                Access::Read => earlier.all(|(_, a)| *a == Access::Read),
            }
        })
    }

    /// Pending tickets whose hazards are clear, in submission order.
    pub fn ready(&self) -> Vec<Ticket> {
        self.live
            .iter()
            .filter(|(_, e)| e.status == Status::Pending)
            .filter(|(t, e)| self.hazards_clear(**t, &e.spec))
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn is_ready(&self, ticket: Ticket) -> bool {
        self.live
            .get(&ticket)
            .is_some_and(|e| e.status == Status::Pending && self.hazards_clear(ticket, &e.spec))
    }

    /// Marks a ready ticket as running.
    pub fn start(&mut self, ticket: Ticket, at: f64) -> Result<()> {
        if !self.is_ready(ticket) {
            return Err(Error::protocol(format!("ticket {} is not ready", ticket.0)));
        }
        self.live.get_mut(&ticket).expect("checked").status = Status::Running { since: at };
        Ok(())
    }

    /// Retires a running ticket, releasing its variables.
    pub fn complete(&mut self, ticket: Ticket, at: f64) -> Result<()> {
        let start = match self.live.get(&ticket).map(|e| e.status) {
            Some(Status::Running { since }) => since,
            Some(Status::Pending) => {
                return Err(Error::protocol(format!(
                    "ticket {} has not started",
                    ticket.0
                )))
            }
            None => {
                return Err(Error::protocol(format!(
                    "ticket {} is unknown or already complete",
                    ticket.0
                )))
            }
        };
        let entry = self.live.remove(&ticket).expect("checked");
        for (var, _) in entry.spec.accesses() {
            let queue = self.queues.get_mut(&var).expect("queued at submit");
            queue.retain(|(t, _)| *t != ticket);
            if queue.is_empty() {
                self.queues.remove(&var);
            }
        }
        self.completed += 1;
        if self.record_trace {
            self.trace.push(TraceEntry {
                ticket,
                label: entry.spec.label,
                start,
                end: at,
            });
        }
        Ok(())
    }

    pub fn spec(&self, ticket: Ticket) -> Option<&OpSpec> {
        self.live.get(&ticket).map(|e| &e.spec)
    }

    pub fn is_running(&self, ticket: Ticket) -> bool {
        matches!(
            self.live.get(&ticket).map(|e| e.status),
            Some(Status::Running { .. })
        )
    }

    pub fn is_completed(&self, ticket: Ticket) -> bool {
        ticket.0 < self.next_seq && !self.live.contains_key(&ticket)
    }

    pub fn running(&self) -> Vec<Ticket> {
        self.live
            .iter()
            .filter(|(_, e)| matches!(e.status, Status::Running { .. }))
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn completed_count(&self) -> u64 {
        self.completed
    }

    /// No pending or running work.
    pub fn is_idle(&self) -> bool {
        self.live.is_empty()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: VarId = VarId(0);

    fn w_r_r_w() -> (DepEngine, [Ticket; 4]) {
        let mut e = DepEngine::new();
        let w1 = e.submit(OpSpec::new("write-1").writes([V]));
        let r2 = e.submit(OpSpec::new("read-2").reads([V]));
        let r3 = e.submit(OpSpec::new("read-3").reads([V]));
        let w4 = e.submit(OpSpec::new("write-4").writes([V]));
        (e, [w1, r2, r3, w4])
    }

    #[test]
    fn first_op_is_ready() {
        let mut e = DepEngine::new();
        let t = e.submit(OpSpec::new("a").reads([V]).writes([VarId(1)]));
        assert_eq!(e.ready(), vec![t]);
    }

    #[test]
    fn read_waits_for_earlier_write() {
        let mut e = DepEngine::new();
        let w = e.submit(OpSpec::new("w").writes([V]));
        let r = e.submit(OpSpec::new("r").reads([V]));
        assert_eq!(e.ready(), vec![w]);
        e.start(w, 0.0).unwrap();
        assert!(e.ready().is_empty());
        e.complete(w, 1.0).unwrap();
        assert_eq!(e.ready(), vec![r]);
    }

    #[test]
    fn disjoint_ops_ready_together() {
        let mut e = DepEngine::new();
        let a = e.submit(OpSpec::new("a").writes([VarId(0)]));
        let b = e.submit(OpSpec::new("b").writes([VarId(1)]));
        assert_eq!(e.ready(), vec![a, b]);
    }

    #[test]
    fn write_read_read_write_queue_states() {
        let (mut e, [w1, r2, r3, w4]) = w_r_r_w();
        assert_eq!(e.ready(), vec![w1]);
        e.start(w1, 0.0).unwrap();
        e.complete(w1, 1.0).unwrap();
        assert_eq!(e.ready(), vec![r2, r3]);
        e.start(r2, 1.0).unwrap();
        e.start(r3, 1.0).unwrap();
        e.complete(r2, 2.0).unwrap();
        assert!(e.ready().is_empty(), "write-4 must wait for read-3");
        e.complete(r3, 3.0).unwrap();
        assert_eq!(e.ready(), vec![w4]);
        e.start(w4, 3.0).unwrap();
        e.complete(w4, 4.0).unwrap();
        assert!(e.is_idle());
        let labels: Vec<&str> = e.trace().iter().map(|t| t.label.as_str()).collect();
        assert_eq!(labels, ["write-1", "read-2", "read-3", "write-4"]);
        assert_eq!(e.trace()[2].start, 1.0);
        assert_eq!(e.trace()[2].end, 3.0);
    }

    #[test]
    fn two_writes_never_ready_together() {
        let mut e = DepEngine::new();
        let a = e.submit(OpSpec::new("a").writes([V]));
        let b = e.submit(OpSpec::new("b").writes([V]));
        assert_eq!(e.ready(), vec![a]);
        e.start(a, 0.0).unwrap();
        assert!(e.ready().is_empty());
        e.complete(a, 0.0).unwrap();
        assert_eq!(e.ready(), vec![b]);
    }

    #[test]
    fn read_modify_write_is_a_writer() {
        let mut e = DepEngine::new();
        let r = e.submit(OpSpec::new("r").reads([V]));
        let rmw = e.submit(OpSpec::new("rmw").reads([V]).writes([V]));
        let r2 = e.submit(OpSpec::new("r2").reads([V]));
        assert_eq!(e.ready(), vec![r]);
        e.start(r, 0.0).unwrap();
        e.complete(r, 0.0).unwrap();
        assert_eq!(e.ready(), vec![rmw]);
        e.start(rmw, 0.0).unwrap();
        e.complete(rmw, 0.0).unwrap();
        assert_eq!(e.ready(), vec![r2]);
    }

    #[test]
    fn protocol_errors() {
        let (mut e, [w1, r2, ..]) = w_r_r_w();
        assert!(matches!(e.complete(w1, 0.0), Err(Error::Protocol(_))));
        assert!(matches!(e.start(r2, 0.0), Err(Error::Protocol(_))));
        assert!(matches!(
            e.complete(Ticket(99), 0.0),
            Err(Error::Protocol(_))
        ));
        e.start(w1, 0.0).unwrap();
        assert!(matches!(e.start(w1, 0.0), Err(Error::Protocol(_))));
        e.complete(w1, 0.0).unwrap();
        assert!(matches!(e.complete(w1, 0.0), Err(Error::Protocol(_))));
        assert!(e.is_completed(w1));
        assert!(!e.is_completed(r2));
    }
}
