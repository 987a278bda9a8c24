//! Shared fixtures for the criterion benches.

use odsgd_core::cluster::{Mode, RunConfig};
use odsgd_core::model::{gen_synthetic, Dataset, ModelSpec};
use odsgd_core::simnet::TimingModel;

/// Seeded classification data of the size used across the benches.
pub fn dataset(n: usize, d: usize, k: usize) -> Dataset {
    gen_synthetic(17, n, d, k, 3.0).expect("valid synthetic shape")
}

/// A short run with evaluation off, so the bench times the simulator and
/// the training kernels only.
pub fn run_config(mode: Mode, workers: usize, iters: u64, model: ModelSpec) -> RunConfig {
    let mut c = RunConfig::new(
        mode,
        workers,
        16,
        model,
        TimingModel::homogeneous(workers, 1.0, 2.0, 1.0),
    );
    c.max_iters = Some(iters);
    c.wp = iters / 10;
    c.evaluate = false;
    c
}
