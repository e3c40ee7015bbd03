use contam_bench::{sample, spec};
use contam_core::{
    decompose_beta, decomposition_se, estimate, population_beta, BootstrapConfig, DesignSpec,
    EstimatorKind,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn decomposition(c: &mut Criterion) {
    let mut group = c.benchmark_group("decompose_beta");
    for n in [1_000, 10_000] {
        let ds = sample(20, 2, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &ds, |b, ds| {
            b.iter(|| decompose_beta(black_box(ds), &DesignSpec::default()).unwrap())
        });
    }
    group.finish();
}

fn estimators(c: &mut Criterion) {
    let ds = sample(20, 2, 5_000);
    let mut group = c.benchmark_group("estimators");
    for kind in EstimatorKind::ALL {
        group.bench_function(kind.name(), |b| {
            b.iter(|| estimate(black_box(&ds), &DesignSpec::default(), kind).unwrap())
        });
    }
    group.finish();
}

fn bootstrap(c: &mut Criterion) {
    let ds = sample(10, 2, 2_000);
    let config = BootstrapConfig {
        replicates: 50,
        ..BootstrapConfig::default()
    };
    let mut group = c.benchmark_group("bootstrap");
    group.sample_size(10);
    group.bench_function("50 replicates", |b| {
        b.iter(|| decomposition_se(black_box(&ds), &DesignSpec::default(), config).unwrap())
    });
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let spec = spec(50, 4);
    c.bench_function("population_beta/50x4", |b| {
        b.iter(|| population_beta(black_box(&spec)).unwrap())
    });
}

criterion_group!(benches, decomposition, estimators, bootstrap, oracle);
criterion_main!(benches);
