//! Worker state machine. Each iteration is a batch of operations handed to
//! the worker's dependency engine; the engine decides what overlaps.
//!
//! Variables visible to the engine:
//!
//! | var        | holds                                              |
//! |------------|----------------------------------------------------|
//! | `comm_buf` | last pulled server weights                         |
//! | `comm_bak` | backup weights that receive local updates          |
//! | `dev_w`    | weights broadcast to the devices                   |
//! | `grad_buf` | reduced gradient, read by push and local update    |
//! | `dev_g[d]` | gradient produced on device `d`                    |

use std::collections::BTreeMap;

use super::trace::{Actor, TraceLog};
use super::{intra_node_reduce, Event, Mode, Msg, RunContext};
use crate::depengine::{DepEngine, OpSpec, Ticket, VarId};
use crate::error::{Error, Result};
use crate::model::forward_backward;
use crate::optim::{LrSchedule, UpdaterState};
use crate::simnet::{EventQueue, SimTime};
use crate::tensor::ParamStore;

const COMM_BUF: VarId = VarId(0);
const COMM_BAK: VarId = VarId(1);
const DEV_W: VarId = VarId(2);
const GRAD_BUF: VarId = VarId(3);

fn dev_grad(d: usize) -> VarId {
    VarId(4 + d as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum WorkerStage {
    WarmUp,
    Switching,
    Steady,
}

impl WorkerStage {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkerStage::WarmUp => "warmup",
            WorkerStage::Switching => "switching",
            WorkerStage::Steady => "steady",
        }
    }
}

/// Stage of iteration `iter`. Only OD-SGD leaves the warm-up flow;
/// `wp = 0` starts in Steady.
pub fn stage_of(mode: Mode, wp: u64, iter: u64) -> WorkerStage {
    if mode != Mode::OdSgd {
        WorkerStage::WarmUp
    } else if wp == 0 || iter > wp {
        WorkerStage::Steady
    } else if iter + 1 >= wp {
        WorkerStage::Switching
    } else {
        WorkerStage::WarmUp
    }
}

/// Weights tagged with the server version they descend from.
#[derive(Debug, Clone, PartialEq)]
pub struct Versioned {
    pub w: ParamStore,
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    InitPull,
    Broadcast { from_bak: bool },
    Copy,
    Compute { device: usize },
    Reduce,
    Push,
    LocalUpdate,
    Pull,
}

impl OpKind {
    fn label(self) -> String {
        match self {
            OpKind::InitPull => "init_pull".into(),
            OpKind::Broadcast { .. } => "broadcast".into(),
            OpKind::Copy => "copy".into(),
            OpKind::Compute { device } => format!("compute.d{device}"),
            OpKind::Reduce => "reduce".into(),
            OpKind::Push => "push".into(),
            OpKind::LocalUpdate => "local_update".into(),
            OpKind::Pull => "pull".into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct WorkerOp {
    kind: OpKind,
    iter: u64,
}

pub struct WorkerState {
    id: usize,
    mode: Mode,
    wp: u64,
    devices: usize,
    total_iters: u64,
    engine: DepEngine,
    ops: BTreeMap<Ticket, WorkerOp>,
    comm_buf: Option<Versioned>,
    comm_bak: Option<Versioned>,
    dev_w: Option<Versioned>,
    dev_grads: Vec<Option<ParamStore>>,
    grad_buf: Option<(ParamStore, u64)>,
    local: UpdaterState,
    local_lr: LrSchedule,
    /// Replies that arrived before their pull op started, keyed by round.
    replies: BTreeMap<Option<u64>, Versioned>,
    waiting_pull: Option<(Ticket, Option<u64>)>,
    next_iter: u64,
    bak_seeded: bool,
    stage: Option<WorkerStage>,
    starts: Vec<SimTime>,
    finished_at: Option<SimTime>,
}

impl WorkerState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        mode: Mode,
        wp: u64,
        devices: usize,
        total_iters: u64,
        local: UpdaterState,
        local_lr: LrSchedule,
        record_engine_trace: bool,
    ) -> Self {
        WorkerState {
            id,
            mode,
            wp,
            devices,
            total_iters,
            engine: if record_engine_trace {
                DepEngine::new()
            } else {
                DepEngine::without_trace()
            },
            ops: BTreeMap::new(),
            comm_buf: None,
            comm_bak: None,
            dev_w: None,
            dev_grads: vec![None; devices],
            grad_buf: None,
            local,
            local_lr,
            replies: BTreeMap::new(),
            waiting_pull: None,
            next_iter: 0,
            bak_seeded: false,
            stage: None,
            starts: Vec::new(),
            finished_at: None,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn stage_of(&self, iter: u64) -> WorkerStage {
        stage_of(self.mode, self.wp, iter)
    }

    /// Broadcast start time of each started iteration.
    pub fn starts(&self) -> &[SimTime] {
        &self.starts
    }

    /// Completion time of the final pull.
    pub fn finished_at(&self) -> Option<SimTime> {
        self.finished_at
    }

    pub fn is_done(&self) -> bool {
        self.next_iter >= self.total_iters && self.engine.is_idle()
    }

    pub fn engine(&self) -> &DepEngine {
        &self.engine
    }

    pub fn comm_bak(&self) -> Option<&Versioned> {
        self.comm_bak.as_ref()
    }

    fn submit(&mut self, kind: OpKind, iter: u64, duration: f64) -> Ticket {
        let base = OpSpec::new(kind.label()).duration(duration);
        let spec = match kind {
            OpKind::InitPull | OpKind::Pull => base.writes([COMM_BUF]),
            OpKind::Broadcast { from_bak } => base
                .reads([if from_bak { COMM_BAK } else { COMM_BUF }])
                .writes([DEV_W]),
            OpKind::Copy => base.reads([COMM_BUF]).writes([COMM_BAK]),
            OpKind::Compute { device } => base.reads([DEV_W]).writes([dev_grad(device)]),
            OpKind::Reduce => base
                .reads((0..self.devices).map(dev_grad))
                .writes([GRAD_BUF]),
            OpKind::Push => base.reads([GRAD_BUF]),
            OpKind::LocalUpdate => base.reads([GRAD_BUF, DEV_W, COMM_BAK]).writes([COMM_BAK]),
        };
        let ticket = self.engine.submit(spec);
        self.ops.insert(ticket, WorkerOp { kind, iter });
        ticket
    }

    fn submit_compute_push(&mut self, iter: u64, ctx: &RunContext) {
        let t_cop = ctx.timing.t_cop[self.id];
        for device in 0..self.devices {
            self.submit(OpKind::Compute { device }, iter, t_cop);
        }
        self.submit(OpKind::Reduce, iter, 0.0);
        self.submit(OpKind::Push, iter, 0.0);
    }

    /// Synchronous flow: broadcast pulled weights, compute, push, pull.
    /// During switching the backup buffer is seeded after the pull at
    /// `wp − 1` and receives its first local update at `wp`.
    pub(crate) fn submit_warmup_iter(&mut self, iter: u64, ctx: &RunContext) -> Result<()> {
        let stage = self.stage_of(iter);
        if stage == WorkerStage::Steady {
            return Err(Error::protocol(format!(
                "worker {} iteration {iter} is past warm-up",
                self.id
            )));
        }
        self.submit(OpKind::Broadcast { from_bak: false }, iter, 0.0);
        self.submit_compute_push(iter, ctx);
        if self.mode == Mode::OdSgd && iter == self.wp {
            self.submit(OpKind::LocalUpdate, iter, ctx.timing.local_update_cost);
        }
        self.submit(OpKind::Pull, iter, 0.0);
        if self.mode == Mode::OdSgd && iter + 1 == self.wp {
            self.submit(OpKind::Copy, iter, 0.0);
            self.bak_seeded = true;
        }
        Ok(())
    }

    /// Overlapped flow: broadcast the backup weights, refresh the backup
    /// from the last pull, compute, push and locally update, pull.
    pub(crate) fn submit_steady_iter(&mut self, iter: u64, ctx: &RunContext) -> Result<()> {
        if self.stage_of(iter) != WorkerStage::Steady {
            return Err(Error::protocol(format!(
                "worker {} iteration {iter} is not in the steady stage",
                self.id
            )));
        }
        if !self.bak_seeded {
            return Err(Error::protocol(format!(
                "worker {} has no backup weights to broadcast",
                self.id
            )));
        }
        self.submit(OpKind::Broadcast { from_bak: true }, iter, 0.0);
        self.submit(OpKind::Copy, iter, 0.0);
        self.submit_compute_push(iter, ctx);
        self.submit(OpKind::LocalUpdate, iter, ctx.timing.local_update_cost);
        self.submit(OpKind::Pull, iter, 0.0);
        Ok(())
    }

    fn submit_iteration(&mut self, iter: u64, ctx: &RunContext) -> Result<()> {
        match self.stage_of(iter) {
            WorkerStage::Steady => self.submit_steady_iter(iter, ctx)?,
            _ => self.submit_warmup_iter(iter, ctx)?,
        }
        self.next_iter = iter + 1;
        Ok(())
    }

    /// Round-trip latency for messages of iteration `iter`.
    fn latency(&self, iter: u64, ctx: &RunContext) -> f64 {
        match self.stage_of(iter) {
            WorkerStage::Steady => ctx.timing.t_com,
            _ => ctx.timing.t_com_prime,
        }
    }

    /// Issues the initial pull and the first iteration.
    pub(crate) fn launch(&mut self, env: &mut Env<'_>) -> Result<()> {
        let ctx = env.ctx;
        let c = self.latency(0, ctx);
        self.submit(OpKind::InitPull, 0, 0.0);
        env.queue.post(
            c / 2.0,
            Event::Arrive(Msg::Pull {
                worker: self.id,
                round: None,
                latency: c / 2.0,
            }),
        )?;
        if self.stage_of(0) == WorkerStage::Steady {
            self.submit(OpKind::Copy, 0, 0.0);
            self.bak_seeded = true;
        }
        if self.total_iters > 0 {
            self.submit_iteration(0, ctx)?;
        }
        self.pump(0.0, env)
    }

    /// Starts every ready operation, finishing zero-cost ones in place.
    pub(crate) fn pump(&mut self, now: SimTime, env: &mut Env<'_>) -> Result<()> {
        loop {
            let ready = self.engine.ready();
            if ready.is_empty() {
                return Ok(());
            }
            for ticket in ready {
                self.engine.start(ticket, now)?;
                let op = self.ops[&ticket];
                env.trace.record(
                    now,
                    Actor::Worker(self.id),
                    "op_start",
                    Some(op.iter),
                    || format!("op={}", op.kind.label()),
                );
                match op.kind {
                    OpKind::Broadcast { .. } => {
                        self.on_iteration_start(op.iter, now, env)?;
                        self.finish(ticket, now, env)?;
                    }
                    OpKind::InitPull | OpKind::Pull => {
                        let round = (op.kind == OpKind::Pull).then_some(op.iter);
                        if self.replies.contains_key(&round) {
                            self.finish(ticket, now, env)?;
                        } else {
                            self.waiting_pull = Some((ticket, round));
                        }
                    }
                    _ => {
                        let duration = self.engine.spec(ticket).expect("live").duration;
                        if duration > 0.0 {
                            env.queue.post(
                                now + duration,
                                Event::OpDone {
                                    worker: self.id,
                                    ticket,
                                },
                            )?;
                        } else {
                            self.finish(ticket, now, env)?;
                        }
                    }
                }
            }
        }
    }

    fn on_iteration_start(&mut self, iter: u64, now: SimTime, env: &mut Env<'_>) -> Result<()> {
        debug_assert_eq!(self.starts.len() as u64, iter);
        self.starts.push(now);
        let stage = self.stage_of(iter);
        if self.stage != Some(stage) {
            self.stage = Some(stage);
            env.trace
                .record(now, Actor::Worker(self.id), "stage", Some(iter), || {
                    format!("stage={}", stage.as_str())
                });
        }
        if iter + 1 < self.total_iters {
            self.submit_iteration(iter + 1, env.ctx)?;
        }
        Ok(())
    }

    /// Completes a running op and applies its effect.
    pub(crate) fn finish(&mut self, ticket: Ticket, now: SimTime, env: &mut Env<'_>) -> Result<()> {
        let op = self
            .ops
            .remove(&ticket)
            .ok_or_else(|| Error::protocol(format!("worker {} has no op {}", self.id, ticket.0)))?;
        self.apply(op, now, env)?;
        self.engine.complete(ticket, now)?;
        env.trace
            .record(now, Actor::Worker(self.id), "op_end", Some(op.iter), || {
                format!("op={}", op.kind.label())
            });
        Ok(())
    }

    fn apply(&mut self, op: WorkerOp, now: SimTime, env: &mut Env<'_>) -> Result<()> {
        let ctx = env.ctx;
        let missing = |what: &str| {
            Error::protocol(format!(
                "worker {} iteration {}: {what} is empty",
                self.id, op.iter
            ))
        };
        match op.kind {
            OpKind::InitPull | OpKind::Pull => {
                let round = (op.kind == OpKind::Pull).then_some(op.iter);
                let reply = self
                    .replies
                    .remove(&round)
                    .ok_or_else(|| missing("pull reply"))?;
                self.comm_buf = Some(reply);
                if op.kind == OpKind::Pull && op.iter + 1 == self.total_iters {
                    self.finished_at = Some(now);
                }
            }
            OpKind::Broadcast { from_bak } => {
                let src = if from_bak {
                    &self.comm_bak
                } else {
                    &self.comm_buf
                };
                let src = src
                    .as_ref()
                    .ok_or_else(|| missing(if from_bak { "comm_bak" } else { "comm_buf" }))?;
                self.dev_w = Some(src.clone());
            }
            OpKind::Copy => {
                let src = self.comm_buf.as_ref().ok_or_else(|| missing("comm_buf"))?;
                self.comm_bak = Some(src.clone());
            }
            OpKind::Compute { device } => {
                let w = self.dev_w.as_ref().ok_or_else(|| missing("dev_w"))?;
                let epoch = ctx.plan.epoch_of(op.iter);
                let order = env.orders.get(epoch, ctx);
                let batch = ctx.plan.worker_batch(order, op.iter, self.id);
                let part = batch.split(self.devices)?.swap_remove(device);
                let lg = forward_backward(&ctx.model, &w.w, &ctx.train, &part)?;
                self.dev_grads[device] = Some(lg.grads);
            }
            OpKind::Reduce => {
                let grads = self
                    .dev_grads
                    .iter_mut()
                    .map(|g| g.take())
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| missing("device gradient"))?;
                let version = self.dev_w.as_ref().ok_or_else(|| missing("dev_w"))?.version;
                self.grad_buf = Some((intra_node_reduce(&grads)?, version));
            }
            OpKind::Push => {
                let (g, version) = self.grad_buf.as_ref().ok_or_else(|| missing("grad_buf"))?;
                let half = self.latency(op.iter, ctx) / 2.0;
                env.queue.post(
                    now + half,
                    Event::Arrive(Msg::Push {
                        worker: self.id,
                        round: op.iter,
                        grad: g.clone(),
                        version: *version,
                    }),
                )?;
                env.queue.post(
                    now + half,
                    Event::Arrive(Msg::Pull {
                        worker: self.id,
                        round: Some(op.iter),
                        latency: half,
                    }),
                )?;
            }
            OpKind::LocalUpdate => {
                let (g, _) = self.grad_buf.as_ref().ok_or_else(|| missing("grad_buf"))?;
                let base = self.dev_w.as_ref().ok_or_else(|| missing("dev_w"))?;
                let bak = self.comm_bak.as_mut().ok_or_else(|| missing("comm_bak"))?;
                let epoch = op.iter as f64 / ctx.plan.iters_per_epoch() as f64;
                let lr = self.local_lr.lr_at(epoch, op.iter, self.total_iters);
                self.local.apply(&mut bak.w, &base.w, g, lr)?;
            }
        }
        Ok(())
    }

    /// Stores a pull reply and completes the pull waiting on it, if any.
    pub(crate) fn on_reply(
        &mut self,
        round: Option<u64>,
        reply: Versioned,
        now: SimTime,
        env: &mut Env<'_>,
    ) -> Result<()> {
        if self.replies.insert(round, reply).is_some() {
            return Err(Error::protocol(format!(
                "worker {} got two replies for round {round:?}",
                self.id
            )));
        }
        if let Some((ticket, want)) = self.waiting_pull {
            if want == round {
                self.waiting_pull = None;
                self.finish(ticket, now, env)?;
            }
        }
        self.pump(now, env)
    }
}

/// Epoch permutations, computed on first use.
#[derive(Debug, Default)]
pub(crate) struct OrderCache {
    orders: BTreeMap<u64, Vec<usize>>,
}

impl OrderCache {
    pub(crate) fn get(&mut self, epoch: u64, ctx: &RunContext) -> &[usize] {
        if !self.orders.contains_key(&epoch) {
            // Workers drift at most a few epochs apart; keep a small window.
            while self.orders.len() >= 4 {
                self.orders.pop_first();
            }
            self.orders.insert(epoch, ctx.plan.epoch_order(epoch));
        }
        &self.orders[&epoch]
    }
}

/// Shared simulation state lent to a worker while it handles an event.
pub(crate) struct Env<'a> {
    pub ctx: &'a RunContext,
    pub queue: &'a mut EventQueue<Event>,
    pub trace: &'a mut TraceLog,
    pub orders: &'a mut OrderCache,
}
