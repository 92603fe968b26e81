//! Two-dimensional benchmark limit-states with known failure probabilities.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use super::{LimitState, LimitStateModel};
use crate::enkf::Localization;
use crate::error::Result;

struct FnModel {
    dim: usize,
    f: fn(&[f64]) -> f64,
}

impl LimitStateModel for FnModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        Ok((self.f)(u))
    }
}

fn convex_g(u: &[f64]) -> f64 {
    0.1 * (u[0] - u[1]).powi(2) - FRAC_1_SQRT_2 * (u[0] + u[1]) + 2.5
}

fn parabolic_g(u: &[f64]) -> f64 {
    5.0 - u[1] - 0.5 * (u[0] - 0.1).powi(2)
}

fn series_g(u: &[f64]) -> f64 {
    let q = 0.1 * (u[0] - u[1]).powi(2);
    let s = (u[0] + u[1]) * FRAC_1_SQRT_2;
    let c = 7.0 * FRAC_1_SQRT_2;
    (q - s + 3.0)
        .min(q + s + 3.0)
        .min(u[0] - u[1] + c)
        .min(u[1] - u[0] + c)
}

/// Convex limit-state, single failure mode, `P_f = 4.21e-3`.
pub fn convex() -> Result<LimitState> {
    LimitState::new(
        "convex",
        Arc::new(FnModel { dim: 2, f: convex_g }),
        Some(4.21e-3),
        1,
        Localization::Global,
    )
}

/// Parabolic limit-state with two failure modes, `P_f = 3.01e-3`.
pub fn parabolic() -> Result<LimitState> {
    LimitState::new(
        "parabolic",
        Arc::new(FnModel {
            dim: 2,
            f: parabolic_g,
        }),
        Some(3.01e-3),
        2,
        Localization::Fixed { alpha: 2.0 },
    )
}

/// Four-branch series system, `P_f = 2.2e-3`.
pub fn series() -> Result<LimitState> {
    LimitState::new(
        "series",
        Arc::new(FnModel { dim: 2, f: series_g }),
        Some(2.2e-3),
        4,
        Localization::Fixed { alpha: 0.25 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_values() {
        assert_eq!(convex().unwrap().eval(&[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(parabolic().unwrap().eval(&[0.1, 0.0]).unwrap(), 5.0);
        assert_eq!(series().unwrap().eval(&[0.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn series_branches_are_active_in_their_quadrants() {
        let g = series().unwrap();
        // along the diagonal the first branch fails first
        assert!(g.eval(&[2.2, 2.2]).unwrap() < 0.0);
        assert!(g.eval(&[-2.2, -2.2]).unwrap() < 0.0);
        // anti-diagonal hits the linear branches at |u1 - u2| = 7/sqrt(2)
        let c = 3.5 * FRAC_1_SQRT_2;
        assert!(g.eval(&[-c - 0.01, c + 0.01]).unwrap() < 0.0);
        assert!(g.eval(&[c + 0.01, -c - 0.01]).unwrap() < 0.0);
        assert!(g.eval(&[-c + 0.01, c - 0.01]).unwrap() > 0.0);
    }

    #[test]
    fn parabolic_has_two_lobes() {
        let g = parabolic().unwrap();
        assert!(g.eval(&[3.5, 0.0]).unwrap() < 0.0);
        assert!(g.eval(&[-3.3, 0.0]).unwrap() < 0.0);
        assert!(g.eval(&[0.1, 4.9]).unwrap() > 0.0);
    }
}
