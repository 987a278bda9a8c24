use odsgd_core::cluster::{run_training, Actor, Mode, RunConfig, RunSummary, TraceEvent};
use odsgd_core::model::{gen_synthetic, Dataset, ModelSpec};
use odsgd_core::optim::UpdaterKind;
use odsgd_core::simnet::{t_new, t_org, TimingModel};

fn data() -> Dataset {
    gen_synthetic(3, 64, 2, 2, 3.0).unwrap()
}

fn cfg(mode: Mode, workers: usize, t_cop: f64, t_com: f64, t_com_prime: f64) -> RunConfig {
    let mut c = RunConfig::new(
        mode,
        workers,
        4,
        ModelSpec::softmax(2, 2),
        TimingModel::homogeneous(workers, t_cop, t_com, t_com_prime),
    );
    c.max_iters = Some(24);
    c.evaluate = false;
    c.record_trace = true;
    c
}

fn run(c: &RunConfig) -> RunSummary {
    run_training(c, &data(), None).unwrap()
}

fn events<'a>(
    s: &'a RunSummary,
    actor: Actor,
    event: &'a str,
) -> impl Iterator<Item = &'a TraceEvent> {
    s.trace
        .iter()
        .filter(move |e| e.actor == actor && e.event == event)
}

#[test]
fn ssgd_iteration_time_is_t_org() {
    for (a, c) in [(3.0, 2.0), (1.0, 0.0), (2.0, 5.0)] {
        let cfg = cfg(Mode::Ssgd, 2, a, c, c);
        let s = run(&cfg);
        assert_eq!(s.measured_iter_time(&cfg), Some(t_org(a, c)), "{a} {c}");
    }
}

#[test]
fn odsgd_iteration_time_is_t_new() {
    for (a, c) in [(3.0, 3.0), (2.0, 4.0), (5.0, 0.0), (1.0, 7.0), (3.0, 1.0)] {
        let mut cfg = cfg(Mode::OdSgd, 2, a, c, c / 2.0);
        cfg.wp = 3;
        let s = run(&cfg);
        assert_eq!(s.measured_iter_time(&cfg), Some(t_new(a, c)), "{a} {c}");
    }
}

#[test]
fn pull_waits_for_the_round() {
    let mut c = cfg(Mode::Ssgd, 2, 1.0, 2.0, 2.0);
    c.timing.t_cop = vec![1.0, 3.0];
    let s = run(&c);
    let deferred = events(&s, Actor::Server, "pull_deferred")
        .find(|e| e.round == Some(0))
        .unwrap();
    assert_eq!(deferred.label("worker"), Some("0"));
    let reply = events(&s, Actor::Server, "pull_reply")
        .find(|e| e.round == Some(0) && e.label("worker") == Some("0"))
        .unwrap();
    let slow_push = events(&s, Actor::Server, "push_recv")
        .find(|e| e.round == Some(0) && e.label("worker") == Some("1"))
        .unwrap();
    assert!(reply.time >= slow_push.time);
    assert_eq!(reply.label("version"), Some("1"));
}

#[test]
fn async_pull_is_answered_at_once() {
    let s = run(&cfg(Mode::Asgd, 2, 1.0, 2.0, 2.0));
    assert_eq!(events(&s, Actor::Server, "pull_deferred").count(), 0);
}

#[test]
fn wp5_switching_trace() {
    let mut c = cfg(Mode::OdSgd, 2, 2.0, 3.0, 2.0);
    c.wp = 5;
    let s = run(&c);
    let w0 = Actor::Worker(0);
    let first = |op: &str| {
        events(&s, w0, "op_end")
            .find(|e| e.label("op") == Some(op))
            .and_then(|e| e.round)
    };
    assert_eq!(first("copy"), Some(4));
    assert_eq!(first("local_update"), Some(5));
    let stages: Vec<_> = events(&s, w0, "stage")
        .map(|e| (e.round.unwrap(), e.label("stage").unwrap().to_string()))
        .collect();
    assert_eq!(
        stages,
        [
            (0, "warmup".into()),
            (4, "switching".into()),
            (6, "steady".into())
        ]
    );
    for st in &s.staleness {
        let want = if st.round > 5 { 1 } else { 0 };
        assert_eq!(st.staleness, want, "{st:?}");
    }
}

#[test]
fn wp0_starts_steady() {
    let mut c = cfg(Mode::OdSgd, 1, 2.0, 1.0, 1.0);
    c.wp = 0;
    let s = run(&c);
    let stages: Vec<_> = events(&s, Actor::Worker(0), "stage").collect();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0].label("stage"), Some("steady"));
    assert!(s
        .staleness
        .iter()
        .all(|st| st.staleness == u64::from(st.round > 0)));
}

#[test]
fn overlaps_in_the_engine_schedule() {
    let mut c = cfg(Mode::OdSgd, 2, 2.0, 3.0, 2.0);
    c.wp = 2;
    c.timing.local_update_cost = 0.5;
    let s = run(&c);
    let eng = &s.engine_traces[0];
    let spans = |label: &str| -> Vec<(f64, f64)> {
        eng.iter()
            .filter(|t| t.label == label)
            .map(|t| (t.start, t.end))
            .collect()
    };
    let pulls = spans("pull");
    let bcasts = spans("broadcast");
    // In steady state a broadcast starts while the previous pull is still
    // in flight.
    assert!(bcasts
        .iter()
        .any(|&(b, _)| pulls.iter().any(|&(ps, pe)| ps < b && b < pe)));
    // The local update runs while the pushed gradient is still travelling.
    let recv: Vec<f64> = events(&s, Actor::Server, "push_recv")
        .filter(|e| e.label("worker") == Some("0"))
        .map(|e| e.time)
        .collect();
    let pushes = spans("push");
    let lus = spans("local_update");
    let overlapped = lus.iter().filter(|&&(ls, le)| {
        le > ls
            && pushes
                .iter()
                .any(|&(p, _)| p == ls && recv.contains(&(p + 1.5)))
    });
    assert!(overlapped.count() > 10);
}

#[test]
fn odsgd_with_identity_local_and_long_warmup_is_ssgd() {
    let mut base = cfg(Mode::Ssgd, 2, 1.0, 2.0, 1.0);
    base.record_params = true;
    let mut od = base.clone();
    od.mode = Mode::OdSgd;
    od.wp = 1_000;
    od.local.kind = UpdaterKind::None;
    let a = run(&base);
    let b = run(&od);
    assert_eq!(a.param_history, b.param_history);
    assert_eq!(a.sim_time, b.sim_time);
}

#[test]
fn asgd_single_worker_matches_ssgd() {
    let mut s = cfg(Mode::Ssgd, 1, 1.0, 2.0, 1.0);
    s.record_params = true;
    let mut a = s.clone();
    a.mode = Mode::Asgd;
    assert_eq!(run(&s).param_history, run(&a).param_history);
}

#[test]
fn steady_rounds_are_incorporated_once() {
    let mut c = cfg(Mode::OdSgd, 3, 1.0, 4.0, 2.0);
    c.timing.t_cop = vec![1.0, 1.5, 2.0];
    c.wp = 2;
    let s = run(&c);
    for r in 0..24u64 {
        let n = s.staleness.iter().filter(|st| st.round == r).count();
        assert_eq!(n, 3, "round {r}");
    }
    // No worker broadcasts round r + 2 before round r completes.
    let completes: Vec<f64> = events(&s, Actor::Server, "round_complete")
        .map(|e| e.time)
        .collect();
    for m in 0..3 {
        for (i, &start) in s.starts[m].iter().enumerate().skip(2) {
            assert!(start >= completes[i - 2], "worker {m} iter {i}");
        }
    }
}

#[test]
fn devices_split_the_batch() {
    let mut one = cfg(Mode::Ssgd, 2, 1.0, 1.0, 1.0);
    one.record_params = true;
    let mut two = one.clone();
    two.devices = 2;
    let a = run(&one);
    let b = run(&two);
    let last = |s: &RunSummary| s.param_history.last().unwrap().clone();
    assert!(last(&a).max_abs_diff(&last(&b)).unwrap() < 1e-12);
    assert_eq!(a.sim_time, b.sim_time);
}

#[test]
fn dc_modes_run_and_report_staleness() {
    for mode in [Mode::DcAsgdC, Mode::DcAsgdA] {
        let mut c = cfg(mode, 2, 1.0, 2.0, 1.0);
        c.timing.t_cop = vec![1.0, 2.0];
        c.global.hp.lambda = 0.04;
        let s = run(&c);
        assert_eq!(s.staleness.len(), 48);
        assert!(s.mean_staleness() > 0.0);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let mut c = cfg(Mode::Ssgd, 2, 1.0, 1.0, 1.0);
    c.timing.t_cop = vec![1.0];
    assert!(run_training(&c, &data(), None).is_err());
    let mut c = cfg(Mode::Ssgd, 2, 1.0, 1.0, 2.0);
    c.devices = 0;
    let e = run_training(&c, &data(), None).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
