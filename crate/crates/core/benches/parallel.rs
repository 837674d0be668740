use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jointalign::detector::{evaluate_detector, DetectorParams, EvalOptions};
use jointalign::par::Exec;
use jointalign::synthgen::{generate_dataset_with, Domain, GenConfig, Split};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn generation(c: &mut Criterion) {
    let cfg = GenConfig::default();
    let mut group = c.benchmark_group("generate_500");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                generate_dataset_with(exec, &cfg, Domain::Target, Split::Test, 500, 0).unwrap()
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let cfg = GenConfig::default();
    let ds =
        generate_dataset_with(Exec::Parallel, &cfg, Domain::Target, Split::Test, 500, 0).unwrap();
    let params = DetectorParams::init(
        &mut ChaCha8Rng::seed_from_u64(0),
        cfg.obs_dim,
        cfg.num_classes,
    );
    let opts = EvalOptions::default();
    let mut group = c.benchmark_group("evaluate_500");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_detector(exec, &params, &ds, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, generation, evaluation);
criterion_main!(benches);
