use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use eps_core::config;
use eps_core::engine::{speedup_breakdown, Features, Scenario};
use eps_core::sweep::{sweep, SweepAxis};
use eps_core::Execution;

fn reference() -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/vit_reference.json");
    config::load(&path).unwrap().1
}

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn alpha_sweep(c: &mut Criterion) {
    let s = reference();
    let alphas = [0.1, 0.2, 1.0 / 3.0, 0.4, 0.5, 0.7];
    let mut group = c.benchmark_group("alpha_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep(black_box(&s), Features::ALL, SweepAxis::Alpha, &alphas, exec).unwrap())
        });
    }
    group.finish();
}

fn chunk_profiles(c: &mut Criterion) {
    let s = reference();
    let lengths = [1.0, 2.0, 4.0, 8.0];
    let mut group = c.benchmark_group("chunk_profiles");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep(black_box(&s), Features::ALL, SweepAxis::Chunks, &lengths, exec).unwrap())
        });
    }
    group.finish();
}

fn breakdown(c: &mut Criterion) {
    let s = reference();
    let ladder = Features::ladder();
    let mut group = c.benchmark_group("breakdown");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| speedup_breakdown(black_box(&s), &ladder, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, alpha_sweep, chunk_profiles, breakdown);
criterion_main!(benches);
