use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use odsgd_bench::dataset;
use odsgd_core::depengine::{DepEngine, OpSpec, VarId};
use odsgd_core::model::{forward_backward, Batch, ModelSpec};
use std::hint::black_box;

fn gradients(c: &mut Criterion) {
    let data = dataset(512, 20, 4);
    let batch = Batch::new((0..64).collect(), data.n()).unwrap();
    let mut g = c.benchmark_group("forward_backward");
    for (name, spec) in [
        ("softmax", ModelSpec::softmax(20, 4)),
        ("mlp32", ModelSpec::mlp(20, 32, 4)),
    ] {
        let p = spec.init_params(1);
        g.bench_with_input(BenchmarkId::from_parameter(name), &spec, |b, spec| {
            b.iter(|| forward_backward(spec, black_box(&p), &data, &batch).unwrap())
        });
    }
    g.finish();
}

// A steady-state-like op stream: each op touches two of eight variables.
fn engine(c: &mut Criterion) {
    c.bench_function("depengine_1k_ops", |b| {
        b.iter(|| {
            let mut e = DepEngine::without_trace();
            for i in 0..1000u32 {
                let op = OpSpec::new("op")
                    .reads([VarId(i % 8)])
                    .writes([VarId((i * 3 + 1) % 8)]);
                e.submit(op);
            }
            let mut t = 0.0;
            while !e.is_idle() {
                for tk in e.ready() {
                    e.start(tk, t).unwrap();
                    e.complete(tk, t).unwrap();
                }
                t += 1.0;
            }
            black_box(e.completed_count())
        })
    });
}

criterion_group!(benches, gradients, engine);
criterion_main!(benches);
