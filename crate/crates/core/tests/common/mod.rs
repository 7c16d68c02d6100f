#![allow(dead_code)]

use cflag::client::ClientState;
use cflag::data::Dataset;
use cflag::model::{LossModel, ModelKind};
use cflag::params::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dataset(r: &mut impl Rng, n: usize, p: usize, k: usize) -> Dataset {
    let features: Vec<f64> = (0..n * p).map(|_| r.random_range(-1.5..1.5)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    Dataset::new(features, labels, p, k).unwrap()
}

pub fn random_params(r: &mut impl Rng, d: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| r.random_range(-scale..scale)).collect())
}

/// Central finite difference of `f` at `x` along every coordinate.
pub fn finite_difference(f: impl Fn(&ParamVector) -> f64, x: &ParamVector, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

pub fn rel(a: &ParamVector, b: &ParamVector) -> f64 {
    let diff = (a - b).norm();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Linear-mse model and `clients` random shards of `n` rows each.
pub fn quadratic_clients(seed: u64, clients: usize, n: usize, p: usize) -> (LossModel, Vec<ClientState>) {
    let mut r = rng(seed);
    let model = LossModel::new(ModelKind::LinearMse, p, 3, 0.0).unwrap();
    let shards: Vec<Dataset> = (0..clients).map(|_| random_dataset(&mut r, n, p, 3)).collect();
    let total = (clients * n) as f64;
    let states =
        shards.into_iter().enumerate().map(|(i, d)| ClientState::new(i, n as f64 / total, d, seed).unwrap()).collect();
    (model, states)
}
