//! Inputs shared by the benchmarks.

use confed::nn::{ArchSpec, Batch, ModelParams, OutputActivation};
use ndarray::Array2;
use rand::Rng;

/// Desk-scale task model: all three code vectors in, one hidden layer.
pub fn task_model(hidden: usize) -> ModelParams {
    ModelParams::init(ArchSpec::mlp(&[1000, hidden, 1], OutputActivation::Sigmoid), 1).unwrap()
}

/// A sparse binary batch, about 3% ones, with balanced labels.
pub fn sparse_batch(rows: usize, width: usize, seed: u64) -> Batch {
    let mut r = confed::rng::rng(seed);
    let x = Array2::from_shape_fn((rows, width), |_| f64::from(r.random_bool(0.03)));
    let y = Array2::from_shape_fn((rows, 1), |(i, _)| f64::from(i % 2 == 0));
    Batch::new(x, y).unwrap()
}

pub fn scores_and_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = confed::rng::rng(seed);
    let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.2)).collect();
    let scores = labels.iter().map(|&l| r.random::<f64>() + if l { 0.3 } else { 0.0 }).collect();
    (scores, labels)
}
