//! Parameter server plus workers, driven on the simulated clock.

pub mod server;
pub mod trace;
pub mod worker;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::depengine::{Ticket, TraceEntry};
use crate::error::{Error, Result};
use crate::model::{evaluate, BatchPlan, Dataset, ModelSpec};
use crate::optim::{HyperParams, LrSchedule, UpdaterKind, UpdaterState};
use crate::simnet::{EventQueue, IterationRecord, SimTime, TimingModel};
use crate::tensor::ParamStore;

pub use server::{DeferredPull, PullOutcome, PushOutcome, ServerState};
pub use trace::{parse_trace, write_trace, Actor, TraceEvent, TraceLog, TRACE_HEADER};
pub use worker::{stage_of, Versioned, WorkerStage, WorkerState};

use worker::{Env, OrderCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Ssgd,
    Asgd,
    DcAsgdC,
    DcAsgdA,
    OdSgd,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Ssgd,
        Mode::Asgd,
        Mode::DcAsgdC,
        Mode::DcAsgdA,
        Mode::OdSgd,
    ];

    /// Whether the server waits for every worker before updating.
    pub fn is_sync(self) -> bool {
        matches!(self, Mode::Ssgd | Mode::OdSgd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ssgd => "ssgd",
            Mode::Asgd => "asgd",
            Mode::DcAsgdC => "dcasgd-c",
            Mode::DcAsgdA => "dcasgd-a",
            Mode::OdSgd => "odsgd",
        }
    }

    /// Update rule the server runs in this mode.
    pub fn server_updater(self) -> UpdaterKind {
        match self {
            Mode::DcAsgdC => UpdaterKind::DcAsgdC,
            Mode::DcAsgdA => UpdaterKind::DcAsgdA,
            _ => UpdaterKind::Sgd,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm || m.as_str().replace('-', "") == norm)
            .ok_or_else(|| Error::config_field("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdaterConfig {
    pub kind: UpdaterKind,
    pub hp: HyperParams,
    pub lr: LrSchedule,
}

impl UpdaterConfig {
    pub fn sgd(lr: f64) -> Self {
        UpdaterConfig {
            kind: UpdaterKind::Sgd,
            hp: HyperParams {
                eta: lr,
                ..HyperParams::default()
            },
            lr: LrSchedule::constant(lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub workers: usize,
    /// Simulated devices per worker.
    pub devices: usize,
    /// Samples per worker per iteration, split across devices.
    pub batch: usize,
    pub epochs: u64,
    /// Caps the run at this many iterations per worker.
    pub max_iters: Option<u64>,
    /// Warm-up length in iterations.
    pub wp: u64,
    pub seed: u64,
    pub model: ModelSpec,
    /// Server update rule; its kind is replaced by the mode's.
    pub global: UpdaterConfig,
    /// Worker-side update applied to the backup weights in OD-SGD.
    pub local: UpdaterConfig,
    pub timing: TimingModel,
    pub record_trace: bool,
    /// Keep the server weights after every update.
    pub record_params: bool,
    /// Evaluate train/test metrics at each epoch boundary.
    pub evaluate: bool,
}

impl RunConfig {
    pub fn new(
        mode: Mode,
        workers: usize,
        batch: usize,
        model: ModelSpec,
        timing: TimingModel,
    ) -> Self {
        RunConfig {
            mode,
            workers,
            devices: 1,
            batch,
            epochs: 1,
            max_iters: None,
            wp: 0,
            seed: 0,
            model,
            global: UpdaterConfig::sgd(0.1),
            local: UpdaterConfig::sgd(0.1),
            timing,
            record_trace: false,
            record_params: false,
            evaluate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config_field("cluster.workers", "must be >= 1"));
        }
        if self.devices == 0 {
            return Err(Error::config_field("cluster.devices", "must be >= 1"));
        }
        if self.batch < self.devices {
            return Err(Error::config_field(
                "train.batch",
                format!(
                    "batch {} is smaller than {} devices",
                    self.batch, self.devices
                ),
            ));
        }
        if self.timing.t_cop.len() != self.workers {
            return Err(Error::config_field(
                "timing.t_cop",
                format!(
                    "{} compute times for {} workers",
                    self.timing.t_cop.len(),
                    self.workers
                ),
            ));
        }
        self.timing.validate()?;
        self.model.validate()?;
        self.global.hp.validate()?;
        self.global.lr.validate()?;
        self.local.hp.validate()?;
        self.local.lr.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub sim_time: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub throughput: f64,
    pub mean_staleness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StalenessSample {
    pub worker: usize,
    pub round: u64,
    pub staleness: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: Mode,
    pub metrics: Vec<EpochMetrics>,
    pub final_params: ParamStore,
    /// Clock when the last event ran.
    pub sim_time: SimTime,
    pub iterations: Vec<IterationRecord>,
    /// Broadcast start times per worker.
    pub starts: Vec<Vec<SimTime>>,
    pub staleness: Vec<StalenessSample>,
    pub trace: Vec<TraceEvent>,
    pub engine_traces: Vec<Vec<TraceEntry>>,
    /// Server weights after each update, starting with the initial weights.
    pub param_history: Vec<ParamStore>,
    pub iters_per_epoch: u64,
    pub total_iters: u64,
}

impl RunSummary {
    /// Average iteration time of worker 0 over its final stage, skipping a
    /// two-iteration ramp and using an even number of intervals so the
    /// alternating overlapped schedule averages out exactly.
    pub fn measured_iter_time(&self, cfg: &RunConfig) -> Option<f64> {
        let starts = self.starts.first()?;
        let last_stage = stage_of(cfg.mode, cfg.wp, self.total_iters.saturating_sub(1));
        let first = (0..self.total_iters).find(|&i| stage_of(cfg.mode, cfg.wp, i) == last_stage)?;
        steady_interval(starts, first as usize + 2)
    }

    pub fn throughput(&self, batch: usize) -> Result<f64> {
        crate::simnet::measure_throughput(&self.iterations, self.starts.len(), batch)
    }

    pub fn mean_staleness(&self) -> f64 {
        if self.staleness.is_empty() {
            return 0.0;
        }
        self.staleness
            .iter()
            .map(|s| s.staleness as f64)
            .sum::<f64>()
            / self.staleness.len() as f64
    }
}

/// Mean spacing of `starts[from..]` over the largest even number of
/// intervals, or `None` with fewer than two.
pub fn steady_interval(starts: &[f64], from: usize) -> Option<f64> {
    let intervals = starts.len().checked_sub(from + 1)?;
    let n = intervals - intervals % 2;
    (n >= 2).then(|| (starts[from + n] - starts[from]) / n as f64)
}

/// Elementwise mean of per-device gradients.
pub fn intra_node_reduce(grads: &[ParamStore]) -> Result<ParamStore> {
    let (first, rest) = grads
        .split_first()
        .ok_or_else(|| Error::config("intra-node reduce needs at least one device"))?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let mut out = first.zeros_like();
    let scale = 1.0 / grads.len() as f64;
    for g in grads {
        out.axpy_in_place(scale, g)?;
    }
    Ok(out)
}

/// Read-only inputs shared by all actors.
pub(crate) struct RunContext {
    pub model: ModelSpec,
    pub train: Dataset,
    pub plan: BatchPlan,
    pub timing: TimingModel,
}

pub(crate) enum Msg {
    Push {
        worker: usize,
        round: u64,
        grad: ParamStore,
        version: u64,
    },
    Pull {
        worker: usize,
        round: Option<u64>,
        latency: f64,
    },
}

pub(crate) enum Event {
    OpDone {
        worker: usize,
        ticket: Ticket,
    },
    Arrive(Msg),
    ServerFree,
    Reply {
        worker: usize,
        round: Option<u64>,
        reply: Versioned,
    },
}

struct ServerNode {
    state: ServerState,
    inbox: VecDeque<Msg>,
    busy: bool,
}

struct Driver<'a> {
    cfg: &'a RunConfig,
    ctx: RunContext,
    test: Option<&'a Dataset>,
    queue: EventQueue<Event>,
    trace: TraceLog,
    orders: OrderCache,
    workers: Vec<WorkerState>,
    server: ServerNode,
    staleness: Vec<StalenessSample>,
    epoch_staleness: (u64, u64),
    metrics: Vec<EpochMetrics>,
    history: Vec<ParamStore>,
    total_iters: u64,
}

impl Driver<'_> {
    fn worker_event(
        &mut self,
        m: usize,
        f: impl FnOnce(&mut WorkerState, &mut Env<'_>) -> Result<()>,
    ) -> Result<()> {
        let mut env = Env {
            ctx: &self.ctx,
            queue: &mut self.queue,
            trace: &mut self.trace,
            orders: &mut self.orders,
        };
        f(&mut self.workers[m], &mut env)
    }

    fn handle(&mut self, now: SimTime, ev: Event) -> Result<()> {
        match ev {
            Event::OpDone { worker, ticket } => self.worker_event(worker, |w, env| {
                w.finish(ticket, now, env)?;
                w.pump(now, env)
            }),
            Event::Reply {
                worker,
                round,
                reply,
            } => self.worker_event(worker, |w, env| w.on_reply(round, reply, now, env)),
            Event::Arrive(msg) => {
                self.server.inbox.push_back(msg);
                self.drain_server(now)
            }
            Event::ServerFree => {
                self.server.busy = false;
                self.drain_server(now)
            }
        }
    }

    fn drain_server(&mut self, now: SimTime) -> Result<()> {
        while !self.server.busy {
            let Some(msg) = self.server.inbox.pop_front() else {
                break;
            };
            let cost = self.serve(msg, now)?;
            if cost > 0.0 {
                self.server.busy = true;
                self.queue.post(now + cost, Event::ServerFree)?;
            }
        }
        Ok(())
    }

    fn send_reply(
        &mut self,
        worker: usize,
        round: Option<u64>,
        depart: SimTime,
        latency: f64,
    ) -> Result<()> {
        let PullOutcome::Reply { weights, version } = self.server.state.reply(worker) else {
            unreachable!("reply always answers");
        };
        self.trace
            .record(depart, Actor::Server, "pull_reply", round, || {
                format!("worker={worker};version={version}")
            });
        self.queue.post(
            depart + latency,
            Event::Reply {
                worker,
                round,
                reply: Versioned {
                    w: weights,
                    version,
                },
            },
        )
    }

    /// Handles one message; returns how long the server stays busy.
    fn serve(&mut self, msg: Msg, now: SimTime) -> Result<f64> {
        match msg {
            Msg::Pull {
                worker,
                round,
                latency,
            } => {
                match self.server.state.handle_pull(worker, round, latency)? {
                    PullOutcome::Reply { weights, version } => {
                        self.trace
                            .record(now, Actor::Server, "pull_reply", round, || {
                                format!("worker={worker};version={version}")
                            });
                        self.queue.post(
                            now + latency,
                            Event::Reply {
                                worker,
                                round,
                                reply: Versioned {
                                    w: weights,
                                    version,
                                },
                            },
                        )?;
                    }
                    PullOutcome::Deferred => {
                        self.trace
                            .record(now, Actor::Server, "pull_deferred", round, || {
                                format!("worker={worker}")
                            });
                    }
                }
                Ok(0.0)
            }
            Msg::Push {
                worker,
                round,
                grad,
                version,
            } => {
                let out = self
                    .server
                    .state
                    .handle_push(worker, round, &grad, version)?;
                self.trace
                    .record(now, Actor::Server, "push_recv", Some(round), || {
                        format!(
                            "worker={worker};version={version};staleness={}",
                            out.staleness
                        )
                    });
                self.staleness.push(StalenessSample {
                    worker,
                    round,
                    staleness: out.staleness,
                });
                self.epoch_staleness.0 += out.staleness;
                self.epoch_staleness.1 += 1;
                let Some(t) = out.updated_to else {
                    return Ok(0.0);
                };
                let timing = &self.ctx.timing;
                let mut cost = timing.server_update_cost;
                if matches!(self.cfg.mode, Mode::DcAsgdC | Mode::DcAsgdA) {
                    cost += timing.local_update_cost;
                }
                let done = now + cost;
                if self.cfg.mode.is_sync() {
                    self.trace.record(
                        done,
                        Actor::Server,
                        "round_complete",
                        Some(t - 1),
                        String::new,
                    );
                }
                if self.cfg.record_params {
                    self.history.push(self.server.state.weights().clone());
                }
                for p in out.released {
                    self.send_reply(p.worker, Some(p.round), done, p.latency)?;
                }
                self.maybe_epoch_end(done)?;
                Ok(cost)
            }
        }
    }

    fn maybe_epoch_end(&mut self, at: SimTime) -> Result<()> {
        let ipe = self.ctx.plan.iters_per_epoch();
        let m = self.cfg.workers as u64;
        let state = &self.server.state;
        let (progress, per_epoch) = if self.cfg.mode.is_sync() {
            (state.t(), ipe)
        } else {
            (state.pushes(), ipe * m)
        };
        if progress == 0 || progress % per_epoch != 0 {
            return Ok(());
        }
        let epoch = progress / per_epoch - 1;
        let (sum, count) = std::mem::take(&mut self.epoch_staleness);
        let mean_staleness = if count == 0 {
            0.0
        } else {
            sum as f64 / count as f64
        };
        let samples = ((epoch + 1) * ipe * m) as f64 * self.cfg.batch as f64;
        let throughput = if at > 0.0 { samples / at } else { 0.0 };
        let (train_acc, train_loss, test_acc) = if self.cfg.evaluate {
            let w = state.weights();
            let (acc, loss) = evaluate(&self.ctx.model, w, &self.ctx.train)?;
            let test = self
                .test
                .map(|t| evaluate(&self.ctx.model, w, t).map(|r| r.0))
                .transpose()?;
            (acc, loss, test)
        } else {
            (f64::NAN, f64::NAN, None)
        };
        self.trace
            .record(at, Actor::Server, "epoch_end", Some(epoch), || {
                format!("train_acc={train_acc};train_loss={train_loss}")
            });
        self.metrics.push(EpochMetrics {
            epoch,
            sim_time: at,
            train_loss,
            train_acc,
            test_acc,
            throughput,
            mean_staleness,
        });
        Ok(())
    }
}

/// Runs the configured cluster to completion on the simulated clock.
pub fn run_training(
    cfg: &RunConfig,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<RunSummary> {
    cfg.validate()?;
    if train.d() != cfg.model.d || train.k() > cfg.model.k {
        return Err(Error::config_field(
            "model",
            format!(
                "model expects d={} k={}, data has d={} k={}",
                cfg.model.d,
                cfg.model.k,
                train.d(),
                train.k()
            ),
        ));
    }
    let plan = BatchPlan::new(train.n(), cfg.workers, cfg.batch, cfg.seed)?;
    let ipe = plan.iters_per_epoch();
    let total_iters = cfg.max_iters.unwrap_or(cfg.epochs * ipe);
    if total_iters == 0 {
        return Err(Error::config_field("train.epochs", "run has no iterations"));
    }

    let w0 = cfg.model.init_params(cfg.seed);
    let global = UpdaterState::new(cfg.mode.server_updater(), cfg.global.hp, &w0)?;
    let server = ServerState::new(
        cfg.mode,
        cfg.workers,
        w0.clone(),
        global,
        cfg.global.lr.clone(),
        ipe,
        total_iters,
    )?;
    let workers = (0..cfg.workers)
        .map(|m| {
            let local = UpdaterState::new(cfg.local.kind, cfg.local.hp, &w0)?;
            Ok(WorkerState::new(
                m,
                cfg.mode,
                cfg.wp,
                cfg.devices,
                total_iters,
                local,
                cfg.local.lr.clone(),
                cfg.record_trace,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut d = Driver {
        cfg,
        ctx: RunContext {
            model: cfg.model,
            train: train.clone(),
            plan,
            timing: cfg.timing.clone(),
        },
        test,
        queue: EventQueue::new(),
        trace: TraceLog::new(cfg.record_trace),
        orders: OrderCache::default(),
        workers,
        server: ServerNode {
            state: server,
            inbox: VecDeque::new(),
            busy: false,
        },
        staleness: Vec::new(),
        epoch_staleness: (0, 0),
        metrics: Vec::new(),
        history: if cfg.record_params {
            vec![w0]
        } else {
            Vec::new()
        },
        total_iters,
    };

    for m in 0..cfg.workers {
        d.worker_event(m, |w, env| w.launch(env))?;
    }
    while let Some((now, ev)) = d.queue.pop() {
        d.handle(now, ev)?;
    }
    if let Some(w) = d.workers.iter().find(|w| !w.is_done()) {
        return Err(Error::protocol(format!(
            "worker {} stalled with work outstanding",
            w.id()
        )));
    }

    let iterations = d
        .workers
        .iter()
        .flat_map(|w| {
            let starts = w.starts();
            let end = w.finished_at().unwrap_or(d.queue.now());
            starts
                .iter()
                .enumerate()
                .map(move |(i, &s)| IterationRecord {
                    worker: w.id(),
                    iter: i as u64,
                    start: s,
                    end: starts.get(i + 1).copied().unwrap_or(end),
                })
        })
        .collect();

    Ok(RunSummary {
        mode: cfg.mode,
        metrics: d.metrics,
        final_params: d.server.state.weights().clone(),
        sim_time: d.queue.now(),
        iterations,
        starts: d.workers.iter().map(|w| w.starts().to_vec()).collect(),
        staleness: d.staleness,
        trace: d.trace.into_events(),
        engine_traces: d
            .workers
            .iter()
            .map(|w| w.engine().trace().to_vec())
            .collect(),
        param_history: d.history,
        iters_per_epoch: ipe,
        total_iters: d.total_iters,
    })
}
