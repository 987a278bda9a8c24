use std::collections::BTreeMap;

use super::Mode;
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, UpdaterKind, UpdaterState};
use crate::tensor::ParamStore;

/// A pull waiting for its round to finish.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeferredPull {
    pub worker: usize,
    pub round: u64,
    /// Reply latency requested by the worker; the server only carries it.
    pub latency: f64,
}

#[derive(Debug, Clone)]
struct RoundAcc {
    count: usize,
    seen: Vec<bool>,
    acc: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushOutcome {
    /// Server version when the gradient is applied, minus the version it was
    /// computed at.
    pub staleness: u64,
    /// New value of `t` if this push caused an update.
    pub updated_to: Option<u64>,
    /// Deferred pulls that can now be answered with the current weights.
    pub released: Vec<DeferredPull>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PullOutcome {
    Reply { weights: ParamStore, version: u64 },
    Deferred,
}

/// Central weight holder. Synchronous modes average one gradient per worker
/// per round; asynchronous modes apply every gradient as it arrives.
#[derive(Debug, Clone)]
pub struct ServerState {
    mode: Mode,
    workers: usize,
    t: u64,
    pushes: u64,
    w: ParamStore,
    rounds: BTreeMap<u64, RoundAcc>,
    updater: UpdaterState,
    lr: LrSchedule,
    iters_per_epoch: u64,
    total_iters: u64,
    deferred: Vec<DeferredPull>,
    snapshots: Vec<Option<ParamStore>>,
}

impl ServerState {
    pub fn new(
        mode: Mode,
        workers: usize,
        w0: ParamStore,
        updater: UpdaterState,
        lr: LrSchedule,
        iters_per_epoch: u64,
        total_iters: u64,
    ) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config_field("cluster.workers", "must be >= 1"));
        }
        let expected = match mode {
            Mode::DcAsgdC => UpdaterKind::DcAsgdC,
            Mode::DcAsgdA => UpdaterKind::DcAsgdA,
            _ => UpdaterKind::Sgd,
        };
        if updater.kind != expected {
            return Err(Error::config(format!(
                "{mode} server needs a {expected:?} updater, got {:?}",
                updater.kind
            )));
        }
        Ok(ServerState {
            mode,
            workers,
            t: 0,
            pushes: 0,
            w: w0,
            rounds: BTreeMap::new(),
            updater,
            lr,
            iters_per_epoch: iters_per_epoch.max(1),
            total_iters,
            deferred: Vec::new(),
            snapshots: vec![None; workers],
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn weights(&self) -> &ParamStore {
        &self.w
    }

    /// Gradients received so far for the current round.
    pub fn count(&self) -> usize {
        self.rounds.get(&self.t).map_or(0, |r| r.count)
    }

    pub fn deferred(&self) -> &[DeferredPull] {
        &self.deferred
    }

    fn check_worker(&self, worker: usize) -> Result<()> {
        if worker >= self.workers {
            return Err(Error::protocol(format!(
                "message from unknown worker {worker} (cluster has {})",
                self.workers
            )));
        }
        Ok(())
    }

    fn global_lr(&self, progress: u64) -> f64 {
        let epoch = progress as f64 / self.iters_per_epoch as f64;
        self.lr.lr_at(epoch, progress, self.total_iters)
    }

    /// Accepts one worker gradient computed at weights of `version`.
    pub fn handle_push(
        &mut self,
        worker: usize,
        round: u64,
        grad: &ParamStore,
        version: u64,
    ) -> Result<PushOutcome> {
        self.check_worker(worker)?;
        grad.check_compatible(&self.w)?;
        // Synchronous rounds are applied when the server reaches them.
        let applied_at = if self.mode.is_sync() { round } else { self.t };
        let staleness = applied_at.checked_sub(version).ok_or_else(|| {
            Error::protocol(format!(
                "gradient from worker {worker} claims version {version} ahead of {applied_at}"
            ))
        })?;
        self.pushes += 1;
        if self.mode.is_sync() {
            self.sync_push(worker, round, grad, staleness)
        } else {
            self.async_push(worker, grad, staleness)
        }
    }

    fn sync_push(
        &mut self,
        worker: usize,
        round: u64,
        grad: &ParamStore,
        staleness: u64,
    ) -> Result<PushOutcome> {
        if round != self.t && round != self.t + 1 {
            return Err(Error::protocol(format!(
                "worker {worker} pushed round {round} while server is at {}",
                self.t
            )));
        }
        let workers = self.workers;
        let template = &self.w;
        let acc = self.rounds.entry(round).or_insert_with(|| RoundAcc {
            count: 0,
            seen: vec![false; workers],
            acc: template.zeros_like(),
        });
        if acc.seen[worker] {
            return Err(Error::protocol(format!(
                "worker {worker} pushed round {round} twice"
            )));
        }
        acc.seen[worker] = true;
        acc.count += 1;
        acc.acc.axpy_in_place(1.0 / workers as f64, grad)?;

        let mut outcome = PushOutcome {
            staleness,
            updated_to: None,
            released: Vec::new(),
        };
        while self.rounds.get(&self.t).is_some_and(|r| r.count == workers) {
            let done = self.rounds.remove(&self.t).expect("checked");
            let lr = self.global_lr(self.t);
            self.updater
                .apply(&mut self.w, &ParamStore::new(), &done.acc, lr)?;
            let finished = self.t;
            self.t += 1;
            outcome.updated_to = Some(self.t);
            let (ready, waiting): (Vec<_>, Vec<_>) =
                self.deferred.iter().partition(|p| p.round <= finished);
            outcome.released.extend(ready);
            self.deferred = waiting;
        }
        Ok(outcome)
    }

    fn async_push(
        &mut self,
        worker: usize,
        grad: &ParamStore,
        staleness: u64,
    ) -> Result<PushOutcome> {
        let lr = self.global_lr(self.pushes.saturating_sub(1) / self.workers as u64);
        match self.mode {
            Mode::DcAsgdC | Mode::DcAsgdA => {
                let base = self.snapshots[worker].take().ok_or_else(|| {
                    Error::protocol(format!("worker {worker} pushed before its first pull"))
                })?;
                self.updater.apply(&mut self.w, &base, grad, lr)?;
            }
            _ => self
                .updater
                .apply(&mut self.w, &ParamStore::new(), grad, lr)?,
        }
        self.t += 1;
        Ok(PushOutcome {
            staleness,
            updated_to: Some(self.t),
            released: Vec::new(),
        })
    }

    /// A pull tagged with the round the worker last pushed, or `None` for
    /// the initial fetch.
    pub fn handle_pull(
        &mut self,
        worker: usize,
        round: Option<u64>,
        latency: f64,
    ) -> Result<PullOutcome> {
        self.check_worker(worker)?;
        if self.mode.is_sync() {
            if let Some(r) = round {
                if r >= self.t {
                    self.deferred.push(DeferredPull {
                        worker,
                        round: r,
                        latency,
                    });
                    return Ok(PullOutcome::Deferred);
                }
            }
        }
        Ok(self.reply(worker))
    }

    /// Current weights for `worker`, recording the DC-ASGD snapshot.
    pub fn reply(&mut self, worker: usize) -> PullOutcome {
        if matches!(self.mode, Mode::DcAsgdC | Mode::DcAsgdA) {
            self.snapshots[worker] = Some(self.w.clone());
        }
        PullOutcome::Reply {
            weights: self.w.clone(),
            version: self.t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::HyperParams;
    use crate::tensor::{DenseTensor, ParamKey};

    fn store(v: f64) -> ParamStore {
        [(ParamKey(0), DenseTensor::from_slice(&[v]).unwrap())]
            .into_iter()
            .collect()
    }

    fn val(s: &ParamStore) -> f64 {
        s.get(ParamKey(0)).unwrap().data()[0]
    }

    fn server(mode: Mode, workers: usize) -> ServerState {
        let kind = match mode {
            Mode::DcAsgdC => UpdaterKind::DcAsgdC,
            Mode::DcAsgdA => UpdaterKind::DcAsgdA,
            _ => UpdaterKind::Sgd,
        };
        let up = UpdaterState::new(kind, HyperParams::default(), &store(0.0)).unwrap();
        ServerState::new(
            mode,
            workers,
            store(1.0),
            up,
            LrSchedule::constant(0.5),
            10,
            100,
        )
        .unwrap()
    }

    #[test]
    fn round_fires_on_last_push() {
        let mut s = server(Mode::Ssgd, 4);
        for m in 0..2 {
            s.handle_push(m, 0, &store(1.0), 0).unwrap();
        }
        assert_eq!(s.count(), 2);
        let o = s.handle_push(2, 0, &store(1.0), 0).unwrap();
        assert_eq!((s.count(), o.updated_to), (3, None));
        let o = s.handle_push(3, 0, &store(1.0), 0).unwrap();
        assert_eq!(o.updated_to, Some(1));
        assert_eq!((s.t(), s.count()), (1, 0));
        assert!((val(s.weights()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_worker_updates_every_push() {
        let mut s = server(Mode::OdSgd, 1);
        for r in 0..3 {
            let o = s.handle_push(0, r, &store(0.2), r).unwrap();
            assert_eq!(o.updated_to, Some(r + 1));
        }
    }

    #[test]
    fn aggregation_is_the_mean() {
        let mut s = server(Mode::Ssgd, 2);
        s.handle_push(0, 0, &store(2.0), 0).unwrap();
        s.handle_push(1, 0, &store(4.0), 0).unwrap();
        assert!((val(s.weights()) - (1.0 - 0.5 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn pull_barrier() {
        let mut s = server(Mode::Ssgd, 2);
        assert!(matches!(
            s.handle_pull(0, None, 0.0).unwrap(),
            PullOutcome::Reply { version: 0, .. }
        ));
        s.handle_push(0, 0, &store(1.0), 0).unwrap();
        assert_eq!(
            s.handle_pull(0, Some(0), 1.5).unwrap(),
            PullOutcome::Deferred
        );
        let o = s.handle_push(1, 0, &store(1.0), 0).unwrap();
        assert_eq!(
            o.released,
            vec![DeferredPull {
                worker: 0,
                round: 0,
                latency: 1.5
            }]
        );
        match s.handle_pull(1, Some(0), 0.0).unwrap() {
            PullOutcome::Reply { version, .. } => assert_eq!(version, 1),
            PullOutcome::Deferred => panic!("round already complete"),
        }
    }

    #[test]
    fn async_pull_is_immediate() {
        let mut s = server(Mode::Asgd, 2);
        s.handle_push(0, 0, &store(1.0), 0).unwrap();
        assert_eq!(s.t(), 1);
        assert!(matches!(
            s.handle_pull(0, Some(0), 0.0).unwrap(),
            PullOutcome::Reply { version: 1, .. }
        ));
        let o = s.handle_push(1, 0, &store(1.0), 0).unwrap();
        assert_eq!(o.staleness, 1);
    }

    #[test]
    fn protocol_violations() {
        let mut s = server(Mode::Ssgd, 2);
        assert!(matches!(
            s.handle_push(5, 0, &store(1.0), 0),
            Err(Error::Protocol(_))
        ));
        s.handle_push(0, 0, &store(1.0), 0).unwrap();
        assert!(matches!(
            s.handle_push(0, 0, &store(1.0), 0),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            s.handle_push(1, 3, &store(1.0), 0),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            s.handle_pull(9, None, 0.0),
            Err(Error::Protocol(_))
        ));
        let mut d = server(Mode::DcAsgdC, 1);
        assert!(matches!(
            d.handle_push(0, 0, &store(1.0), 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn next_round_may_arrive_early() {
        let mut s = server(Mode::OdSgd, 2);
        s.handle_push(0, 0, &store(1.0), 0).unwrap();
        s.handle_push(0, 1, &store(1.0), 0).unwrap();
        assert_eq!(s.t(), 0);
        s.handle_push(1, 0, &store(1.0), 0).unwrap();
        assert_eq!(s.t(), 1);
        s.handle_push(1, 1, &store(1.0), 0).unwrap();
        assert_eq!(s.t(), 2);
    }

    #[test]
    fn dc_server_uses_pull_snapshot() {
        let mut s = server(Mode::DcAsgdC, 2);
        s.handle_pull(0, None, 0.0).unwrap();
        s.handle_pull(1, None, 0.0).unwrap();
        s.handle_push(0, 0, &store(0.0), 0).unwrap();
        // lambda = 0 in the default hyperparameters, so this is plain SGD.
        s.handle_push(1, 0, &store(1.0), 0).unwrap();
        assert!((val(s.weights()) - 0.5).abs() < 1e-15);
    }
}
