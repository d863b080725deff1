use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dasa::delay::DelayModel;
use dasa::sim::{run_replicated, Aggregator, RunConfig};
use dasa::td::TdProblem;
use dasa::ExecMode;

fn replications(c: &mut Criterion) {
    let problem = TdProblem::build(30, 10, 0.5, 7).unwrap();
    let mut group = c.benchmark_group("run_replicated");
    group.sample_size(10);
    for aggregator in [Aggregator::Dasa, Aggregator::NonDelayed] {
        let mut config = RunConfig::new(10, 20_000, 1e-3, aggregator);
        config.delay = DelayModel::Uniform { tau_max: 50 };
        config.trace_stride = 100;
        config.replications = 8;
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let label = format!("{aggregator}/{}", if mode.is_parallel() { "parallel" } else { "sequential" });
            group.bench_with_input(BenchmarkId::from_parameter(label), &mode, |b, &mode| {
                b.iter(|| black_box(run_replicated(&problem, &config, mode).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, replications);
criterion_main!(benches);
