//! Helpers shared by the integration tests.

#![allow(dead_code)]

use enkf_rare::mixtures::{MixtureModel, VmfnmMixture};
use enkf_rare::rng_from_seed;
use enkf_rare::stats::mean_and_se;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Clumps of points around random centers, some of them far from the origin.
pub fn random_dataset(seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let d = rng.random_range(2..=6);
    let n = rng.random_range(200..=600);
    let clumps = rng.random_range(1..=3);
    let centers: Vec<Vec<f64>> = (0..clumps)
        .map(|_| (0..d).map(|_| rng.random_range(-4.0..4.0)).collect())
        .collect();
    let scales: Vec<f64> = (0..clumps).map(|_| rng.random_range(0.2..1.5)).collect();
    DMatrix::from_fn(d, n, |i, j| {
        let c = j % clumps;
        centers[c][i] + scales[c] * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn assert_monotone(history: &[f64], label: &str) {
    for (i, w) in history.windows(2).enumerate() {
        assert!(
            w[1] >= w[0] - 1e-9 * w[0].abs(),
            "{label}: log-likelihood drops at iteration {i}: {} -> {}",
            w[0],
            w[1]
        );
    }
}

/// Whether every step of an EM history is nondecreasing up to relative
/// slack `1e-9`.
pub fn is_monotone(history: &[f64]) -> bool {
    history.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs())
}

/// Two-component vMFNM in three dimensions.
pub fn test_vmfnm_3d() -> MixtureModel {
    MixtureModel::Vmfnm(
        VmfnmMixture::new(
            vec![0.6, 0.4],
            vec![DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::from_vec(vec![0.0, 0.6, -0.8])],
            vec![5.0, 1.5],
            vec![2.0, 0.8],
            vec![3.0, 1.0],
        )
        .unwrap(),
    )
}

/// Importance-sampling estimate of the integral of `exp(model.logpdf)` over
/// `R^d` with proposal `N(0, sigma^2 I)`; returns mean and standard error.
pub fn density_integral(model: &MixtureModel, sigma: f64, n: usize, seed: u64) -> (f64, f64) {
    let d = model.dim();
    let mut rng = rng_from_seed(seed);
    let log_q_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let mut u = vec![0.0; d];
    let w: Vec<f64> = (0..n)
        .map(|_| {
            u.iter_mut().for_each(|x| *x = sigma * rng.sample::<f64, _>(StandardNormal));
            let log_q = log_q_norm - u.iter().map(|x| x * x).sum::<f64>() / (2.0 * sigma * sigma);
            (model.logpdf(&u).unwrap() - log_q).exp()
        })
        .collect();
    mean_and_se(&w)
}

/// Standard normal ensemble closed under reflection of coordinates `2..d`:
/// columns `2i` and `2i + 1` differ only in the sign of those coordinates.
pub fn mirrored_ensemble(d: usize, j: usize, seed: u64) -> DMatrix<f64> {
    assert!(j.is_multiple_of(2));
    let mut rng = rng_from_seed(seed);
    let mut p = DMatrix::zeros(d, j);
    for c in (0..j).step_by(2) {
        for i in 0..d {
            let x: f64 = rng.sample(StandardNormal);
            p[(i, c)] = x;
            p[(i, c + 1)] = if i == 0 { x } else { -x };
        }
    }
    p
}
