use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use odsgd_bench::{dataset, run_config};
use odsgd_core::cluster::{run_training, Mode};
use odsgd_core::model::ModelSpec;

fn modes(c: &mut Criterion) {
    let data = dataset(1024, 20, 4);
    let mut g = c.benchmark_group("run_training_200_iters");
    g.sample_size(20);
    for mode in Mode::ALL {
        let cfg = run_config(mode, 4, 200, ModelSpec::softmax(20, 4));
        g.bench_with_input(BenchmarkId::from_parameter(mode), &cfg, |b, cfg| {
            b.iter(|| run_training(cfg, &data, None).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, modes);
criterion_main!(benches);
