use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use slidessl::bagstore::generate_synthetic;
use slidessl::encoder::ModelConfig;
use slidessl::eval::extract_features;
use slidessl::objectives::{ObjectiveConfig, ObjectiveKind};
use slidessl::par::Execution;
use slidessl::trainer::{batch_gradients, OptimConfig, TrainConfig, TrainState};
use slidessl::{SlideBag, SyntheticSpec, TransformConfig};

fn config() -> TrainConfig {
    TrainConfig {
        objective: ObjectiveConfig {
            kind: ObjectiveKind::SimClr,
            temperature: 0.2,
            ..ObjectiveConfig::default()
        },
        transforms: TransformConfig {
            max_token_limit: Some(64),
            ..TransformConfig::default()
        },
        model: ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            ffn_mult: 2,
            fourier_dim: 16,
            pos_hidden: 32,
            proj_hidden: 64,
            d_proj: 32,
            init_std: 0.02,
        },
        optim: OptimConfig {
            batch_size: 32,
            ..OptimConfig::default()
        },
    }
}

fn bench(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticSpec {
        bags_per_class: 24,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = config();
    let state = TrainState::init(16, &cfg);
    let batch: Vec<&SlideBag> = data.train.bags.iter().take(32).collect();
    let modes = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(batch_gradients(&state, &batch, &cfg, 1, exec).unwrap().loss))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("extract_features");
    group.sample_size(10);
    for (name, exec) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(extract_features(&data.val, &state.network, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
