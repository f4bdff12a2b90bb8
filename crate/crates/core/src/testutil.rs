use rand::Rng;

use crate::action::{Action, Point};
use crate::policy::{CandidateSet, FeatureVector, PolicyParams};

/// `n` distinct click actions with random features in [-1, 1].
pub fn random_set<R: Rng>(rng: &mut R, n: usize, dim: usize) -> CandidateSet {
    let actions = (0..n)
        .map(|i| Action::click(format!("c{i}"), Point::new(10.0 + i as f64, 10.0)))
        .collect();
    let features = (0..n)
        .map(|_| FeatureVector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    CandidateSet { actions, features }
}

pub fn random_params<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> PolicyParams {
    PolicyParams {
        weights: (0..dim).map(|_| rng.gen_range(-scale..scale)).collect(),
        version: 0,
    }
}

/// Central difference of `f` along every coordinate of `theta`.
pub fn finite_diff(theta: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    (0..theta.dim())
        .map(|k| {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p.weights[k] += h;
            m.weights[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Relative error of `a` against `b` in the max norm, with an absolute
/// floor for near-zero gradients.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-3);
    diff / scale
}
