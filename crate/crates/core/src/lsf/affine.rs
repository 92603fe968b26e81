//! Affine limit-states `G(u) = a.u - b`, for which the most likely failure
//! point and the first-order reliability estimate are exact.

use std::sync::Arc;

use super::{LimitState, LimitStateModel};
use crate::enkf::Localization;
use crate::error::{Error, Result};
use crate::stats::normal_cdf;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLsf {
    a: Vec<f64>,
    b: f64,
}

impl AffineLsf {
    pub fn new(a: Vec<f64>, b: f64) -> Result<Self> {
        if a.is_empty() || a.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidArgument("affine normal must be nonzero".into()));
        }
        if !b.is_finite() || a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("affine coefficients".into()));
        }
        Ok(Self { a, b })
    }

    /// `G(u) = u_1 - b`, the orientation used by the mean-field results.
    pub fn first_axis(dim: usize, b: f64) -> Result<Self> {
        let mut a = vec![0.0; dim];
        a[0] = 1.0;
        Self::new(a, b)
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        self.a.iter().zip(u).map(|(a, x)| a * x).sum::<f64>() - self.b
    }

    /// Most likely failure point: the minimum-norm point `(b / |a|^2) a` on
    /// the hyperplane `a.u = b`.
    pub fn mlfp(&self) -> Vec<f64> {
        let norm_sq: f64 = self.a.iter().map(|x| x * x).sum();
        let scale = self.b / norm_sq;
        self.a.iter().map(|x| scale * x).collect()
    }

    /// First-order reliability probability, exact for affine limit-states.
    pub fn form_probability(&self) -> Result<f64> {
        let g0 = -self.b;
        if g0 == 0.0 {
            return Err(Error::InvalidArgument(
                "origin lies on the failure surface".into(),
            ));
        }
        let beta = self.mlfp().iter().map(|x| x * x).sum::<f64>().sqrt();
        let p = normal_cdf(-beta);
        Ok(if g0 > 0.0 { p } else { 1.0 - p })
    }

    pub fn into_limit_state(self) -> Result<LimitState> {
        let pf = self.form_probability().ok();
        let name = format!(
            "affine({},{})",
            self.a
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.b
        );
        LimitState::new(name, Arc::new(self), pf, 1, Localization::Global)
    }
}

impl LimitStateModel for AffineLsf {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        Ok(AffineLsf::value(self, u))
    }
}

pub fn mlfp(lsf: &AffineLsf) -> Vec<f64> {
    lsf.mlfp()
}

pub fn form_probability(lsf: &AffineLsf) -> Result<f64> {
    lsf.form_probability()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn mlfp_examples() {
        assert_eq!(AffineLsf::new(vec![1.0, 0.0], -2.0).unwrap().mlfp(), vec![-2.0, 0.0]);
        assert_eq!(AffineLsf::new(vec![0.0, 1.0], 3.0).unwrap().mlfp(), vec![0.0, 3.0]);
        assert_eq!(AffineLsf::new(vec![1.0, 1.0], 2.0).unwrap().mlfp(), vec![1.0, 1.0]);
    }

    #[test]
    fn form_examples() {
        let p = AffineLsf::new(vec![1.0, 0.0, 0.0], -2.0).unwrap().form_probability().unwrap();
        assert!((p - 0.022_750_131_948_179_2).abs() < 1e-12);
        // u_1 + u_2 <= 2 has probability Phi(sqrt 2)
        let p = AffineLsf::new(vec![1.0, 1.0], 2.0).unwrap().form_probability().unwrap();
        assert!((p - 0.921_350_396_474_857_2).abs() < 1e-12);
        let p = AffineLsf::new(vec![1.0, 0.0], -1e-12).unwrap().form_probability().unwrap();
        assert!((p - 0.5).abs() < 1e-9);
        // origin inside the failure domain takes the complement
        let p = AffineLsf::new(vec![1.0, 0.0], 2.0).unwrap().form_probability().unwrap();
        assert!((p - (1.0 - 0.022_750_131_948_179_2)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(AffineLsf::new(vec![0.0, 0.0], 1.0).is_err());
        let origin = AffineLsf::new(vec![1.0, 0.0], 0.0).unwrap();
        assert!(origin.form_probability().is_err());
    }

    #[test]
    fn crude_monte_carlo_agrees_with_form() {
        let lsf = AffineLsf::new(vec![0.6, -0.8], -1.5).unwrap();
        let exact = lsf.form_probability().unwrap();
        let mut rng = crate::rng_from_seed(11);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| {
                let u: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                lsf.value(&u) < 0.0
            })
            .count();
        let p = hits as f64 / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((p - exact).abs() <= 3.0 * se, "mc {p} vs form {exact}");
    }
}
