use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hiermob::data::{generate_synthetic, GridSpec, SyntheticConfig};
use hiermob::exec::Execution;
use hiermob::model::{BackboneSpec, ModelConfig};
use hiermob::training::{evaluate, Dataset, TrainConfig, Trainer};

fn config(execution: Execution) -> TrainConfig {
    let grid = GridSpec::new(10, 10).unwrap();
    TrainConfig {
        batch_size: 16,
        execution,
        model: ModelConfig { dim: 32, grid, backbone: BackboneSpec::FrozenRandom { layers: 1, heads: 4, seed: 0 }, ..ModelConfig::default() },
        ..TrainConfig::default()
    }
}

fn bench_batches(c: &mut Criterion) {
    let base = config(Execution::Sequential);
    let synth = SyntheticConfig { grid: base.model.grid, ..SyntheticConfig::new(4, 16, 0.1, 0) };
    let data = Dataset::prepare(&generate_synthetic(&synth).unwrap().trajectories, &base).unwrap();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| {
            b.iter_batched(
                || Trainer::new(config(exec)).unwrap(),
                |mut t| t.step(&data).unwrap(),
                BatchSize::PerIteration,
            )
        });
    }
    group.finish();

    let trainer = Trainer::new(base).unwrap();
    let mut group = c.benchmark_group("evaluate_val");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| b.iter(|| evaluate(&trainer.model, &trainer.model.trainable, &data.val, 10, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_batches);
criterion_main!(benches);
