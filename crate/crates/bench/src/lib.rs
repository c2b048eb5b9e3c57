//! Shared fixtures for the criterion benchmarks in `benches/`.

use rand::Rng as _;
use rss_core::network::MlpParams;
use rss_core::{rng, Tensor};

/// Random inputs in `[0, 1)` with labels cycling through the classes.
pub fn batch(rows: usize, cols: usize, classes: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut r = rng::stream(seed, "bench/batch");
    let x = Tensor::from_fn(rows, cols, |_, _| r.random::<f32>());
    (x, (0..rows).map(|i| i % classes).collect())
}

/// The desk-scale MNIST architecture, optionally gated.
pub fn mnist_net(gated: bool) -> MlpParams<f32> {
    let p = MlpParams::glorot(&[784, 128, 64, 10], 0).expect("valid sizes");
    if gated {
        p.with_gates(0)
    } else {
        p
    }
}
