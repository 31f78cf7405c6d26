//! Inputs shared by the benchmarks.

use idu_core::preprocess::{one_hot, EncodedDataset, Provenance};
use idu_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `n` rows, `d` features; the label depends on the first two columns.
pub fn blobs(n: usize, d: usize, classes: usize, seed: u64) -> EncodedDataset {
    let x = random_tensor(&[n, d], seed);
    let labels: Vec<usize> = (0..n)
        .map(|r| {
            let row = x.row(r);
            let s = row[0] + 0.5 * row[1];
            (((s + 1.5) / 3.0 * classes as f32) as usize).min(classes - 1)
        })
        .collect();
    EncodedDataset {
        y: one_hot(&labels, classes).unwrap(),
        labels,
        column_names: (0..d).map(|i| format!("f{i}")).collect(),
        class_names: (0..classes).map(|i| format!("c{i}")).collect(),
        provenance: Provenance::default(),
        x,
    }
}
