use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use coopt_bench::{model, pool_for, prefilled, requests};
use coopt_core::{Engine, EngineOptions, OptimizationMode};

fn decode_step(c: &mut Criterion) {
    let m = model();
    let reqs = requests(8, 256, 4);
    let mut g = c.benchmark_group("decode_step");
    for mode in OptimizationMode::ALL {
        let engine = Engine::new(&m, mode, EngineOptions::default());
        g.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter_batched(
                || prefilled(&m, mode, &reqs),
                |(mut pool, mut states)| engine.decode_step(&mut states, &mut pool).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn run_batch(c: &mut Criterion) {
    let m = model();
    let reqs = requests(8, 128, 8);
    let mut g = c.benchmark_group("run_batch");
    g.sample_size(10);
    for mode in OptimizationMode::ALL {
        let engine = Engine::new(&m, mode, EngineOptions::default());
        g.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter_batched(
                || pool_for(&engine, &reqs),
                |mut pool| engine.run_batch(&reqs, &mut pool).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, decode_step, run_batch);
criterion_main!(benches);
