use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use idu_bench::blobs;
use idu_core::forest::{fit_forest, ForestConfig};
use idu_core::model::{ModelConfig, ModelParams};
use idu_core::train::{train_step, Adam, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_train_step(c: &mut Criterion) {
    let data = blobs(256, 32, 5, 1);
    let mut g = c.benchmark_group("train_step_b256");
    g.sample_size(20);
    for widths in [vec![64, 64, 32], vec![128, 64, 32, 16]] {
        let cfg = ModelConfig {
            widths: widths.clone(),
            ..ModelConfig::new(32, 5)
        };
        let tcfg = TrainConfig::default();
        let mut params = ModelParams::init(&cfg).unwrap();
        let sizes: Vec<usize> = params.learnable().iter().map(|t| t.len()).collect();
        let mut adam = Adam::new(&tcfg, &sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let name = widths.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        g.bench_function(name, |b| {
            b.iter(|| {
                train_step(&mut params, &cfg, black_box(&data.x), &data.y, &mut adam, tcfg.clip_norm, &mut rng).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_forest(c: &mut Criterion) {
    let data = blobs(2000, 64, 5, 2);
    let mut g = c.benchmark_group("forest_fit");
    g.sample_size(10);
    g.bench_function("n2000_d64_t20", |b| {
        let cfg = ForestConfig {
            n_trees: 20,
            ..ForestConfig::default()
        };
        b.iter(|| fit_forest(black_box(&data.x), &data.labels, 5, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_train_step, bench_forest);
criterion_main!(benches);
