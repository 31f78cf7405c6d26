use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use idu_bench::random_tensor;
use idu_core::model::{attend, AttentionParams};
use idu_core::ops::{matmul, scaled_dot_attention};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256, 512] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("scaled_dot_attention");
    for t in [16, 64, 256] {
        let q = random_tensor(&[t, 16], 1);
        let k = random_tensor(&[t, 16], 2);
        let v = random_tensor(&[t, 16], 3);
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, _| {
            bench.iter(|| scaled_dot_attention(black_box(&q), black_box(&k), black_box(&v)).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("attend");
    let dk = 16;
    for (w, group) in [(64, 1), (256, 1), (256, 4)] {
        let p = AttentionParams {
            embed: random_tensor(&[dk, group], 4),
            embed_bias: random_tensor(&[dk], 5),
            w_q: random_tensor(&[dk, dk], 6),
            w_k: random_tensor(&[dk, dk], 7),
            w_v: random_tensor(&[dk, dk], 8),
            out_proj: random_tensor(&[dk], 9),
        };
        let h = random_tensor(&[32, w], 10);
        g.bench_function(format!("b32_w{w}_g{group}"), |bench| {
            bench.iter(|| attend(black_box(&h), &p, dk, group).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_attention);
criterion_main!(benches);
