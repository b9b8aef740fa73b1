//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use metafed::model::{ModelArch, ParamVector};
use metafed::traffic::TrafficSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters with every coordinate uniform in `[-scale, scale]`.
pub fn random_params(arch: ModelArch, scale: f64, rng: &mut ChaCha8Rng) -> ParamVector {
    let values = (0..arch.param_count())
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    ParamVector::from_values(arch, values).unwrap()
}

pub fn random_sample(rng: &mut ChaCha8Rng) -> TrafficSample {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    TrafficSample {
        features: [
            rng.random(),
            rng.random(),
            rng.random(),
            phase.sin(),
            phase.cos(),
        ],
        label: rng.random_range(0..3),
    }
}

pub fn random_batch(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrafficSample> {
    (0..n).map(|_| random_sample(rng)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest per-coordinate relative error between analytic and central
/// finite-difference gradients. Coordinates whose magnitudes are both below
/// `floor` are compared on an absolute scale of `floor`.
pub fn fd_relative_error(params: &ParamVector, batch: &[TrafficSample], h: f64, floor: f64) -> f64 {
    let analytic = metafed::model::grad(params, batch).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let shifted = |d: f64| {
            let mut v = params.values().to_vec();
            v[i] += d;
            ParamVector::from_values(params.arch(), v).unwrap()
        };
        let plus = metafed::model::loss(&shifted(h), batch).unwrap();
        let minus = metafed::model::loss(&shifted(-h), batch).unwrap();
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.values()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
