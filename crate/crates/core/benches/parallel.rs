use std::hint::black_box;

use ca_core::data::BenchmarkSpec;
use ca_core::detect::{score_batch, DetectorKind};
use ca_core::network::{train_standard, TrainConfig};
use ca_core::par::Execution;
use ca_core::synthesis::{synthesize_with, ChainConfig, Regularizer};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn setup() -> (ca_core::network::TrainedNetwork, ca_core::autodiff::Tensor) {
    let (bench, _) = BenchmarkSpec::default()
        .generate(7)
        .unwrap()
        .standardized()
        .unwrap();
    let trained = train_standard(
        &bench.id_train,
        &TrainConfig {
            epochs: 10,
            seed: 7,
            ..Default::default()
        },
    )
    .unwrap();
    (trained, bench.far_ood.features)
}

fn chains(c: &mut Criterion) {
    let (trained, _) = setup();
    let cfg = ChainConfig {
        horizon: 100,
        regularizer: Regularizer::data_free_default(),
        ..Default::default()
    };
    let mut group = c.benchmark_group("synthesize_16x100");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                synthesize_with(
                    &trained.network,
                    Some(&trained.stats),
                    16,
                    black_box(&cfg),
                    None,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let (trained, x) = setup();
    let mut group = c.benchmark_group("score_odin_400");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                score_batch(
                    &DetectorKind::odin_default(),
                    &trained.network,
                    None,
                    black_box(&x),
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, chains, scoring);
criterion_main!(benches);
