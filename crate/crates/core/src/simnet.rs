//! Virtual clock, event queue and the analytical iteration-time model.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Abstract simulated time units.
pub type SimTime = f64;

struct Scheduled<T> {
    at: SimTime,
    seq: u64,
    payload: T,
}

impl<T> PartialEq for Scheduled<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Scheduled<T> {}

impl<T> PartialOrd for Scheduled<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Scheduled<T> {
    // Reversed so the max-heap pops the earliest (at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Discrete-event queue executing payloads in `(at, seq)` order.
pub struct EventQueue<T> {
    now: SimTime,
    seq: u64,
    heap: BinaryHeap<Scheduled<T>>,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        EventQueue {
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
        }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn post(&mut self, at: SimTime, payload: T) -> Result<()> {
        if !at.is_finite() || at < self.now {
            return Err(Error::protocol(format!(
                "event posted at {at} but the clock is at {}",
                self.now
            )));
        }
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            payload,
        });
        self.seq += 1;
        Ok(())
    }

    /// Posts `payload` at `now + delay`.
    pub fn post_after(&mut self, delay: SimTime, payload: T) -> Result<()> {
        self.post(self.now + delay, payload)
    }

    /// Removes the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(SimTime, T)> {
        let ev = self.heap.pop()?;
        self.now = ev.at;
        Some((ev.at, ev.payload))
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.at)
    }

    /// Drains the queue through `handle`, which may post further events.
    /// Returns the final clock.
    pub fn run_until_idle<F>(&mut self, mut handle: F) -> Result<SimTime>
    where
        F: FnMut(&mut Self, SimTime, T) -> Result<()>,
    {
        while let Some((at, payload)) = self.pop() {
            handle(self, at, payload)?;
        }
        Ok(self.now)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingModel {
    /// Compute time per iteration, one entry per worker.
    pub t_cop: Vec<f64>,
    /// Round trip when communication overlaps computation.
    pub t_com: f64,
    /// Exposed round trip of the synchronous baseline.
    pub t_com_prime: f64,
    /// Cost of one compensation step.
    pub local_update_cost: f64,
    /// Cost of applying one aggregate update at the server.
    pub server_update_cost: f64,
}

impl TimingModel {
    pub fn homogeneous(workers: usize, t_cop: f64, t_com: f64, t_com_prime: f64) -> Self {
        TimingModel {
            t_cop: vec![t_cop; workers],
            t_com,
            t_com_prime,
            local_update_cost: 0.0,
            server_update_cost: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_cop.is_empty() {
            return Err(Error::config_field(
                "timing.t_cop",
                "needs at least one worker",
            ));
        }
        let check = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config_field(
                    field,
                    format!("must be finite and >= 0, got {v}"),
                ))
            }
        };
        for &c in &self.t_cop {
            check("timing.t_cop", c)?;
        }
        check("timing.t_com", self.t_com)?;
        check("timing.t_com_prime", self.t_com_prime)?;
        check("timing.local_update_cost", self.local_update_cost)?;
        check("timing.server_update_cost", self.server_update_cost)?;
        if self.t_com_prime > self.t_com {
            return Err(Error::config_field(
                "timing.t_com_prime",
                format!(
                    "must not exceed t_com ({} > {})",
                    self.t_com_prime, self.t_com
                ),
            ));
        }
        Ok(())
    }

    /// Slowest worker's compute time; it paces synchronous rounds.
    pub fn t_cop_max(&self) -> f64 {
        self.t_cop.iter().copied().fold(0.0, f64::max)
    }
}

/// Baseline iteration time `t_cop + t_com'`.
pub fn t_org(t_cop: f64, t_com_prime: f64) -> f64 {
    t_cop + t_com_prime
}

/// Overlapped iteration time, averaged over two adjacent iterations.
pub fn t_new(t_cop: f64, t_com: f64) -> f64 {
    if t_com <= t_cop {
        t_cop
    } else {
        (t_com + t_cop) / 2.0
    }
}

pub fn predict_iter_time(tm: &TimingModel) -> f64 {
    t_new(tm.t_cop_max(), tm.t_com)
}

/// `(T_org − T_new) / T_org`.
pub fn imp_rate_parts(t_cop: f64, t_com: f64, t_com_prime: f64) -> Result<f64> {
    let org = t_org(t_cop, t_com_prime);
    if org <= 0.0 {
        return Err(Error::config("baseline iteration time is zero"));
    }
    Ok((org - t_new(t_cop, t_com)) / org)
}

pub fn imp_rate(tm: &TimingModel) -> Result<f64> {
    imp_rate_parts(tm.t_cop_max(), tm.t_com, tm.t_com_prime)
}

/// The same rate written as one minus a ratio, branch by branch.
pub fn imp_rate_closed_form(t_cop: f64, t_com: f64, t_com_prime: f64) -> Result<f64> {
    let org = t_cop + t_com_prime;
    if org <= 0.0 {
        return Err(Error::config("baseline iteration time is zero"));
    }
    Ok(if t_com <= t_cop {
        1.0 - t_cop / org
    } else {
        1.0 - (t_com + t_cop) / (2.0 * org)
    })
}

/// Speed growth of `speed_x` over `speed_ssgd`, in percent.
pub fn gr_rate(speed_x: f64, speed_ssgd: f64) -> Result<f64> {
    if speed_ssgd <= 0.0 || !speed_ssgd.is_finite() {
        return Err(Error::config(format!(
            "baseline speed must be > 0, got {speed_ssgd}"
        )));
    }
    Ok((speed_x - speed_ssgd) / speed_ssgd * 100.0)
}

/// Span of one worker iteration in simulated time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub worker: usize,
    pub iter: u64,
    pub start: SimTime,
    pub end: SimTime,
}

/// `M · batch · iterations / elapsed`, where `iterations` is the largest
/// per-worker count and `elapsed` spans the earliest start to the latest end.
pub fn measure_throughput(
    records: &[IterationRecord],
    workers: usize,
    batch: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::protocol("no iterations recorded"));
    }
    let mut per_worker = vec![0u64; workers.max(1)];
    for r in records {
        let slot = per_worker
            .get_mut(r.worker)
            .ok_or_else(|| Error::protocol(format!("record for unknown worker {}", r.worker)))?;
        *slot += 1;
    }
    let iters = per_worker.iter().copied().max().unwrap_or(0);
    let start = records
        .iter()
        .map(|r| r.start)
        .fold(f64::INFINITY, f64::min);
    let end = records
        .iter()
        .map(|r| r.end)
        .fold(f64::NEG_INFINITY, f64::max);
    let elapsed = end - start;
    if elapsed <= 0.0 {
        return Err(Error::protocol("recorded iterations span no time"));
    }
    Ok((workers * batch) as f64 * iters as f64 / elapsed)
}
