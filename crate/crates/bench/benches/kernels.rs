use amskv_bench::{block, gaussian, history};
use amskv_core::attn::{block_attention, inter_scale_similarity};
use amskv_core::kernel::{bilinear_resize, matmul, softmax_rows, SpatialMap};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn kernels(c: &mut Criterion) {
    let a = gaussian(1, 256, 64);
    let b = gaussian(2, 64, 64);
    c.bench_function("matmul 256x64x64", |bch| {
        bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });

    let logits = gaussian(3, 256, 680);
    c.bench_function("softmax 256x680", |bch| {
        bch.iter(|| softmax_rows(black_box(&logits), 1.0).unwrap())
    });

    let map = SpatialMap::from_tokens(&gaussian(4, 169, 16), 13, 13).unwrap();
    c.bench_function("resize 13->16 x16ch", |bch| {
        bch.iter(|| bilinear_resize(black_box(&map), 16, 16).unwrap())
    });

    let prev = block(9, 13, 2, 8);
    let cur = block(10, 16, 2, 8);
    c.bench_function("similarity 13->16", |bch| {
        bch.iter(|| inter_scale_similarity(black_box(cur.keys()), 16, prev.keys(), 13).unwrap())
    });
}

fn attention(c: &mut Criterion) {
    let hist = history(2, 8);
    let queries: Vec<_> = (0..2).map(|h| gaussian(50 + h, 256, 8)).collect();
    let mut group = c.benchmark_group("block attention, last scale");
    for (name, keep) in [("full 680", 10usize), ("last two 425", 2)] {
        let ctx: Vec<_> = hist[hist.len() - keep..].iter().collect();
        group.bench_with_input(BenchmarkId::from_parameter(name), &ctx, |bch, ctx| {
            bch.iter(|| block_attention(black_box(&queries), ctx, false).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernels, attention);
criterion_main!(benches);
