use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use datelab::harness::{all_step_date, run_experiment, ExperimentConfig};
use datelab::par::Execution;

fn config(date: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(0);
    cfg.n_samples = 64;
    cfg.date = date.then(all_step_date);
    cfg
}

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_experiment");
    group.sample_size(10);
    for (label, date) in [("fixed", false), ("date", true)] {
        let cfg = config(date);
        for (mode, exec) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
            group.bench_with_input(BenchmarkId::new(label, mode), &exec, |b, &exec| {
                b.iter(|| black_box(run_experiment(&cfg, exec).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, sampling);
criterion_main!(benches);
