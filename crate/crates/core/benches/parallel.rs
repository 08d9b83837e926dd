use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saf_marl::env::GridConfig;
use saf_marl::nn::gumbel_softmax_st;
use saf_marl::par::{map_parallel, map_sequential};
use saf_marl::seeds::derive_seed;
use saf_marl::trainer::{build_model, evaluate_policy, TrainConfig};

const CHUNKS: u64 = 8;

/// Selection counts from 20k Gumbel draws, seeded per chunk.
fn gumbel_chunk(chunk: u64) -> [usize; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(1, chunk));
    let mut counts = [0; 4];
    for _ in 0..20_000 {
        counts[gumbel_softmax_st(&[0.5, -0.2, 0.1, 0.0], 1.0, &mut rng).unwrap().index] += 1;
    }
    counts
}

fn evaluate_seed(seed: u64) -> f64 {
    let grid = GridConfig::default();
    let cfg = TrainConfig { hidden: 16, belief_width: 16, message_width: 8, key_width: 8, ..TrainConfig::default() };
    let model = build_model(&grid, &cfg, seed);
    evaluate_policy(&model, &grid, 2, seed).unwrap()
}

fn bench_maps(c: &mut Criterion) {
    let mut group = c.benchmark_group("gumbel_monte_carlo");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", CHUNKS), |b| {
        b.iter(|| map_sequential((0..CHUNKS).collect(), |k| black_box(gumbel_chunk(k))))
    });
    group.bench_function(BenchmarkId::new("parallel", CHUNKS), |b| {
        b.iter(|| map_parallel((0..CHUNKS).collect(), |k| black_box(gumbel_chunk(k))))
    });
    group.finish();

    let mut group = c.benchmark_group("multi_seed_evaluation");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", CHUNKS), |b| {
        b.iter(|| map_sequential((0..CHUNKS).collect(), |s| black_box(evaluate_seed(s))))
    });
    group.bench_function(BenchmarkId::new("parallel", CHUNKS), |b| {
        b.iter(|| map_parallel((0..CHUNKS).collect(), |s| black_box(evaluate_seed(s))))
    });
    group.finish();
}

criterion_group!(benches, bench_maps);
criterion_main!(benches);
