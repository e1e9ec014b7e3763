#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stride_core::data::{generate_dataset, Policy, TrainSet, TrajectoryDataset};
use stride_core::envs::EnvSpec;
use stride_core::train::{loss_and_grad, Objective};

/// Largest relative disagreement between tape gradients and central
/// differences over `count` randomly chosen coordinates of `theta`. Every
/// evaluation replays the same latent draws.
pub fn gradient_check<O: Objective>(obj: &O, batch: &TrainSet, count: usize, seed: u64) -> f64 {
    let n = obj.params().len();
    gradient_check_range(obj, batch, 0..n, count, seed)
}

/// As [`gradient_check`], drawing coordinates from `range` only.
pub fn gradient_check_range<O: Objective>(
    obj: &O,
    batch: &TrainSet,
    range: std::ops::Range<usize>,
    count: usize,
    seed: u64,
) -> f64 {
    let theta = obj.params();
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grad) = loss_and_grad(obj, &theta, batch, &mut rng.clone()).unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let idx = rand::seq::index::sample(&mut pick, range.len(), count.min(range.len()));
    let mut worst: f64 = 0.0;
    for i in idx.into_iter().map(|i| i + range.start) {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let mut tp = theta.clone();
        tp[i] += h;
        let up = loss_and_grad(obj, &tp, batch, &mut rng.clone()).unwrap().0.total;
        tp[i] = theta[i] - h;
        let down = loss_and_grad(obj, &tp, batch, &mut rng.clone()).unwrap().0.total;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        if std::env::var("GRAD_DEBUG").is_ok() {
            eprintln!("{i}: fd {fd:e} tape {:e} rel {rel:e}", grad[i]);
        }
        worst = worst.max(rel);
    }
    worst
}

pub fn small_dataset(env: &EnvSpec, n: usize, seed: u64) -> TrajectoryDataset {
    generate_dataset(env, Policy::RandomTorque, n, 0.0, seed).unwrap()
}

/// The first `n` rows of a dataset's training tensors.
pub fn head(ds: &TrajectoryDataset, n: usize) -> TrainSet {
    let all = ds.train_set();
    let idx: Vec<usize> = (0..n.min(all.len())).collect();
    all.select(&idx)
}
