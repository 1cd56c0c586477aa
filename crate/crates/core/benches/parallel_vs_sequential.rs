//! Fan-out workloads under both execution modes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use promptmad::dataio::generate_synthetic_corpus;
use promptmad::metrics::{evaluate, EvalOptions, OracleModel};
use promptmad::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corpus_synthesis(c: &mut Criterion) {
    let mut g = c.benchmark_group("synthetic_corpus_4x8x4");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_synthetic_corpus(4, 8, 4, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn oracle_evaluation(c: &mut Criterion) {
    let corpus = generate_synthetic_corpus(4, 1, 10, 0, Execution::default()).unwrap();
    let opts = EvalOptions { smoothing_sigma: 4.0, batch_size: 1 };
    let mut g = c.benchmark_group("smoothed_oracle_eval_4x10");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&OracleModel, &corpus, &opts, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, corpus_synthesis, oracle_evaluation);
criterion_main!(benches);
