//! Sequential vs rayon paths for the two embarrassingly parallel workloads:
//! a multi-seed sweep and per-task evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use asymreplay::losses::{LossConfig, Method};
use asymreplay::metrics;
use asymreplay::network;
use asymreplay::par::Execution;
use asymreplay::report::{self, DatasetConfig, ExperimentConfig};
use asymreplay::stream::{make_synthetic, SyntheticDatasetSpec};
use asymreplay::trainer::{self, TrainerConfig};

const PATHS: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn seed_sweep(c: &mut Criterion) {
    let spec = SyntheticDatasetSpec::new(16, 10, 60, 1.0);
    let mut cfg = ExperimentConfig::new(Method::ErAce, DatasetConfig::synthetic(spec, 0));
    cfg.seeds = (0..4).collect();
    cfg.hidden = vec![32, 32];
    cfg.feature_dim = 16;
    cfg.buffer_size = 20;
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    for exec in PATHS {
        cfg.execution = exec;
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| report::run_experiment(cfg, None).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let ds = make_synthetic(&SyntheticDatasetSpec::new(16, 10, 400, 1.0), 0).unwrap();
    let cfg = TrainerConfig::new(LossConfig::new(Method::Er));
    let model = network::init_params(&cfg.model.sizes(16), 10, cfg.model.tau, 0).unwrap();
    let (_, meta) = asymreplay::stream::materialize(&ds, &Default::default()).unwrap();
    let tests = trainer::test_sets_by_task(&ds, &meta);
    let sets: Vec<_> = tests.iter().collect();
    let mut group = c.benchmark_group("evaluation");
    for exec in PATHS {
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| metrics::task_accuracies(&model, &sets, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, seed_sweep, evaluation);
criterion_main!(benches);
