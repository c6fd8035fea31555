//! Index build and evaluation on a one-thread pool against a pool with one
//! thread per core. Built without the `parallel` feature both variants run
//! the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxembed::encoder::{Encoder, EncoderConfig};
use ctxembed::evalbench::evaluate;
use ctxembed::retrieval::{build_index, IndexMode};
use ctxembed::synthgen::{generate, SynthConfig};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    [("sequential", 1), ("parallel", cores)]
        .into_iter()
        .map(|(name, n)| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("{name}-{n}t"), pool)
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let corpus = generate(&SynthConfig {
        n_docs: 40,
        ..Default::default()
    })
    .unwrap();
    let encoder = Encoder::new(EncoderConfig {
        dim: 32,
        heads: 2,
        layers: 2,
        ..Default::default()
    })
    .unwrap();
    let pools = pools();

    let mut group = c.benchmark_group("build_index");
    group.sample_size(10);
    for mode in [IndexMode::LateChunk, IndexMode::LateInteraction] {
        for (name, pool) in &pools {
            group.bench_with_input(BenchmarkId::new(mode.name(), name), &mode, |b, &mode| {
                b.iter(|| pool.install(|| build_index(&corpus, &encoder, mode).unwrap()))
            });
        }
    }
    group.finish();

    let index = build_index(&corpus, &encoder, IndexMode::LateChunk).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, pool) in &pools {
        group.bench_function(name, |b| {
            b.iter(|| pool.install(|| evaluate(&index, &corpus.queries, Some(&encoder), 10).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
