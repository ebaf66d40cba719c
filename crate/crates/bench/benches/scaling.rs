use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sable_bench::{mat_lite, observations, sable};
use sable_core::policy::{ActMode, Policy};
use sable_core::sable::MemoryMode;

fn step<P: Policy>(policy: &P, n: usize) -> impl FnMut() -> P::State + '_ {
    let obs = observations(n, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    move || {
        let mut state = policy.initial_state();
        policy.act(&obs, 0, &mut state, ActMode::Sample, &mut rng).unwrap();
        policy.end_step(&mut state, false);
        state
    }
}

fn agents(c: &mut Criterion) {
    let mut group = c.benchmark_group("act-step");
    group.sample_size(10);
    for n in [8usize, 32, 128] {
        let full = sable(n, MemoryMode::FullTrajectory);
        let chunked = sable(n, MemoryMode::AgentChunked(n.min(32)));
        let mat = mat_lite(n);
        let mut f = step(&full, n);
        group.bench_with_input(BenchmarkId::new("sable", n), &n, |b, _| b.iter(|| black_box(f())));
        let mut f = step(&chunked, n);
        group.bench_with_input(BenchmarkId::new("sable-chunked-32", n), &n, |b, _| b.iter(|| black_box(f())));
        let mut f = step(&mat, n);
        group.bench_with_input(BenchmarkId::new("mat-lite", n), &n, |b, _| b.iter(|| black_box(f())));
    }
    group.finish();
}

criterion_group!(benches, agents);
criterion_main!(benches);
