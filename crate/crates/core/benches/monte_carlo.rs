use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossover_pgee::par::Execution;
use crossover_pgee::simulate::{run_monte_carlo_with, ModelKind, SimulationScenario};

fn replicates(c: &mut Criterion) {
    let scenario = SimulationScenario { replicates: 16, ..SimulationScenario::new(10, 5, 1.0) };
    let models = [ModelKind::GeeMain, ModelKind::GeeSpline, ModelKind::GeeSmooth];
    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new(name, scenario.replicates), &exec, |b, &exec| {
            b.iter(|| run_monte_carlo_with(black_box(&scenario), &models, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replicates);
criterion_main!(benches);
