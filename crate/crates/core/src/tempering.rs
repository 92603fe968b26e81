//! Adaptive temperature schedule.
//!
//! The temperature enters the update only through the increment
//! `beta = 1/sigma_new - 1/sigma_old`, so the schedule is stored as inverse
//! temperatures. `sigma_0 = infinity` is `inv_sigma = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperConfig {
    pub delta_target: f64,
    /// Relative bracket width at which the bisection on `beta` stops.
    pub bisection_tol: f64,
    /// Cap on a single inverse-temperature increment.
    pub beta_max: f64,
}

impl TemperConfig {
    pub fn new(delta_target: f64) -> Result<Self> {
        if !(delta_target > 0.0 && delta_target.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "delta_target must be positive, got {delta_target}"
            )));
        }
        Ok(Self {
            delta_target,
            bisection_tol: 1e-10,
            beta_max: 1e10,
        })
    }
}

/// One accepted temperature level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperStep {
    pub sigma: f64,
    /// Step size `h = 1/sigma_new - 1/sigma_old`.
    pub h: f64,
    /// Stopping statistic of the ensemble after the update.
    pub delta_wopt: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemperState {
    pub inv_sigma: f64,
    pub step_index: usize,
    pub history: Vec<TemperStep>,
}

impl TemperState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sigma(&self) -> f64 {
        if self.inv_sigma == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.inv_sigma
        }
    }

    /// Accepts the increment `h` and records the resulting stopping statistic.
    pub fn advance(&mut self, h: f64, delta_wopt: f64) -> Result<()> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
        }
        self.inv_sigma += h;
        self.step_index += 1;
        self.history.push(TemperStep {
            sigma: 1.0 / self.inv_sigma,
            h,
            delta_wopt,
        });
        Ok(())
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.sigma).collect()
    }
}

/// Population coefficient of variation `std / mean` (divisor `J`).
pub fn coeff_variation(w: &[f64]) -> Result<f64> {
    if w.len() < 2 {
        return Err(Error::InvalidArgument("need at least two weights".into()));
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// `w_j = exp(-(inv_sigma_new - inv_sigma_old) gtilde_j^2 / 2)`.
pub fn likelihood_weights(gtilde: &[f64], inv_sigma_old: f64, inv_sigma_new: f64) -> Result<Vec<f64>> {
    if !(inv_sigma_new > inv_sigma_old && inv_sigma_old >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "inverse temperatures must increase: {inv_sigma_old} -> {inv_sigma_new}"
        )));
    }
    let beta = inv_sigma_new - inv_sigma_old;
    Ok(gtilde.iter().map(|g| (-0.5 * beta * g * g).exp()).collect())
}

/// Result of the temperature search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NextSigma {
    pub sigma: f64,
    pub inv_sigma: f64,
    /// `h = 1/sigma_new - 1/sigma_old`.
    pub h: f64,
    /// Coefficient of variation reached at the returned step.
    pub delta: f64,
    /// `delta_target` cannot be reached below `beta_max`.
    pub cv_unreachable: bool,
}

/// CV of the weights as a function of `beta`. Squares are shifted by their
/// minimum, which rescales every weight by the same factor and so leaves the
/// CV unchanged, but keeps at least one weight equal to 1 for any `beta`.
fn cv_at(g2: &[f64], beta: f64) -> f64 {
    let n = g2.len() as f64;
    let w: Vec<f64> = g2.iter().map(|x| (-0.5 * beta * x).exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Finds the increment `beta` with `CV(w(beta)) = delta_target`.
///
/// The CV is nondecreasing in `beta`, so the minimizer of
/// `(CV - delta_target)^2` is its root: bracket by doubling from `1e-8`,
/// then bisect.
pub fn next_sigma(gtilde: &[f64], state: &TemperState, cfg: &TemperConfig) -> Result<NextSigma> {
    if gtilde.len() < 2 {
        return Err(Error::InvalidArgument("need at least two particles".into()));
    }
    if gtilde.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("auxiliary limit-state value".into()));
    }
    let min_sq = gtilde.iter().map(|g| g * g).fold(f64::INFINITY, f64::min);
    let g2: Vec<f64> = gtilde.iter().map(|g| g * g - min_sq).collect();
    if g2.iter().all(|x| *x == 0.0) {
        return Err(Error::NoVariability);
    }
    let target = cfg.delta_target;
    let finish = |beta: f64, delta: f64, cv_unreachable: bool| {
        let inv_sigma = state.inv_sigma + beta;
        NextSigma {
            sigma: 1.0 / inv_sigma,
            inv_sigma,
            h: beta,
            delta,
            cv_unreachable,
        }
    };

    let mut hi = 1e-8;
    let mut cv_hi = cv_at(&g2, hi);
    let mut lo = 0.0;
    if cv_hi > target {
        // huge limit-state values; shrink until the CV drops below target
        while cv_hi > target && hi > f64::MIN_POSITIVE {
            lo = hi / 2.0;
            let cv_lo = cv_at(&g2, lo);
            if cv_lo <= target {
                break;
            }
            hi = lo;
            cv_hi = cv_lo;
        }
    } else {
        while cv_hi < target {
            if hi >= cfg.beta_max {
                let cv_max = cv_at(&g2, cfg.beta_max);
                if cv_max < target {
                    return Ok(finish(cfg.beta_max, cv_max, true));
                }
                hi = cfg.beta_max;
                break;
            }
            lo = hi;
            hi = (2.0 * hi).min(cfg.beta_max);
            cv_hi = cv_at(&g2, hi);
        }
    }
    while hi - lo > cfg.bisection_tol * hi {
        let mid = 0.5 * (lo + hi);
        if cv_at(&g2, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let cv_lo = cv_at(&g2, lo);
    let cv_hi = cv_at(&g2, hi);
    let (beta, delta) = if lo > 0.0 && (cv_lo - target).abs() <= (cv_hi - target).abs() {
        (lo, cv_lo)
    } else {
        (hi, cv_hi)
    };
    Ok(finish(beta, delta, false))
}

/// Stopping statistic: the CV of the weights `1{gtilde = 0}`, which is
/// `sqrt((1 - p)/p)` for a failure fraction `p`; infinite when `p = 0`.
pub fn stopping_cv(gtilde: &[f64]) -> f64 {
    let n_fail = gtilde.iter().filter(|g| **g == 0.0).count();
    if n_fail == 0 {
        return f64::INFINITY;
    }
    let p = n_fail as f64 / gtilde.len() as f64;
    ((1.0 - p) / p).sqrt()
}

/// Smooth approximations of the failure indicator at one `g` value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRow {
    pub sigma: f64,
    pub g: f64,
    /// `exp(-max(0, g)^2 / (2 sigma))`
    pub enkf: f64,
    /// `Phi(-g / sigma)`
    pub sis: f64,
}

pub fn indicator_curves(g_grid: &[f64], sigma: f64) -> Result<Vec<IndicatorRow>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    Ok(g_grid
        .iter()
        .map(|&g| {
            let gt = crate::lsf::auxiliary_lsf(g);
            IndicatorRow {
                sigma,
                g,
                enkf: (-gt * gt / (2.0 * sigma)).exp(),
                sis: normal_cdf(-g / sigma),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(n_ones: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i < n_ones { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coeff_variation(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        // 16 of 17 ones: p = 0.941176..., CV = sqrt(1/16)
        let cv = coeff_variation(&binary(16, 17)).unwrap();
        assert!((cv - 0.25).abs() < 1e-14);
        let cv = coeff_variation(&binary(1, 10)).unwrap();
        assert!((cv - 3.0).abs() < 1e-14);
        assert_eq!(coeff_variation(&[0.0, 0.0]), Err(Error::DegenerateWeights));
    }

    #[test]
    fn weights_examples() {
        let w = likelihood_weights(&[0.0, 1.0], 0.0, 1.02165).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.6).abs() < 1e-5);
        let w = likelihood_weights(&[0.0, 0.0], 3.0, 7.0).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        assert!(likelihood_weights(&[1.0], 2.0, 2.0).is_err());
    }

    #[test]
    fn next_sigma_two_particle_closed_form() {
        let cfg = TemperConfig::new(0.25).unwrap();
        let ns = next_sigma(&[0.0, 1.0], &TemperState::new(), &cfg).unwrap();
        // delta = (1 - q)/(1 + q) with q = exp(-beta/2); delta = 0.25 gives q = 0.6
        let beta = -2.0 * 0.6f64.ln();
        assert!(!ns.cv_unreachable);
        assert!((ns.h - beta).abs() < 1e-8);
        assert!((ns.sigma - 1.0 / beta).abs() < 1e-8);
        assert!((ns.sigma - 0.97881).abs() < 1e-5);
        assert!((ns.delta - 0.25).abs() < 1e-6);
    }

    #[test]
    fn next_sigma_unreachable_target() {
        // two particles: the CV never exceeds 1
        let cfg = TemperConfig::new(1.5).unwrap();
        let ns = next_sigma(&[0.0, 1.0], &TemperState::new(), &cfg).unwrap();
        assert!(ns.cv_unreachable);
        assert_eq!(ns.h, cfg.beta_max);
    }

    #[test]
    fn next_sigma_without_variability() {
        let cfg = TemperConfig::new(1.0).unwrap();
        assert_eq!(
            next_sigma(&[2.0, 2.0, 2.0], &TemperState::new(), &cfg),
            Err(Error::NoVariability)
        );
    }

    #[test]
    fn next_sigma_with_huge_values() {
        let cfg = TemperConfig::new(0.5).unwrap();
        let g: Vec<f64> = (0..20).map(|i| 1e6 * (1.0 + i as f64)).collect();
        let ns = next_sigma(&g, &TemperState::new(), &cfg).unwrap();
        assert!(!ns.cv_unreachable);
        assert!((ns.delta - 0.5).abs() < 1e-6);
    }

    #[test]
    fn stopping_examples() {
        assert_eq!(stopping_cv(&[0.0, 0.0]), 0.0);
        assert_eq!(stopping_cv(&[0.0, 1.0]), 1.0);
        assert_eq!(stopping_cv(&[1.0, 2.0]), f64::INFINITY);
    }

    #[test]
    fn state_tracks_schedule() {
        let mut st = TemperState::new();
        assert_eq!(st.sigma(), f64::INFINITY);
        st.advance(0.5, 3.0).unwrap();
        st.advance(1.5, 1.0).unwrap();
        assert_eq!(st.sigmas(), vec![2.0, 0.5]);
        assert_eq!(st.step_index, 2);
        assert!(st.advance(0.0, 1.0).is_err());
    }

    #[test]
    fn indicator_examples() {
        let rows = indicator_curves(&[-1.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(rows[0].enkf, 1.0);
        assert_eq!((rows[1].enkf, rows[1].sis), (1.0, 0.5));
        assert!((rows[2].enkf - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(indicator_curves(&[0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn binary_weight_identity(n in 2usize..400, frac in 0.0f64..1.0) {
            let ones = ((frac * n as f64) as usize).clamp(1, n);
            let w = binary(ones, n);
            let p = ones as f64 / n as f64;
            let cv = coeff_variation(&w).unwrap();
            prop_assert!((cv - ((1.0 - p) / p).sqrt()).abs() < 1e-12 * (1.0 + cv));
            // the stopping statistic is the same quantity on {gtilde = 0}
            let gt: Vec<f64> = w.iter().map(|x| 1.0 - x).collect();
            prop_assert!((stopping_cv(&gt) - cv).abs() < 1e-12 * (1.0 + cv));
        }

        #[test]
        fn solver_reaches_target(
            g in proptest::collection::vec(0.0f64..10.0, 3..60),
            delta in 0.05f64..5.0,
            inv0 in 0.0f64..5.0,
        ) {
            let cfg = TemperConfig::new(delta).unwrap();
            let state = TemperState { inv_sigma: inv0, ..TemperState::default() };
            match next_sigma(&g, &state, &cfg) {
                Ok(ns) => {
                    prop_assert!(ns.h > 0.0);
                    prop_assert!(ns.sigma < state.sigma());
                    if !ns.cv_unreachable {
                        let w = likelihood_weights(&g, inv0, ns.inv_sigma).unwrap();
                        let cv = coeff_variation(&w).unwrap();
                        prop_assert!((cv - delta).abs() <= 1e-6, "{} vs {}", cv, delta);
                    }
                }
                Err(e) => prop_assert_eq!(e, Error::NoVariability),
            }
        }

        #[test]
        fn likelihood_factor_limits(g in 1e-3f64..10.0) {
            let w = likelihood_weights(&[0.0, g], 0.0, 1e12).unwrap();
            prop_assert_eq!(w[0], 1.0);
            prop_assert!(w[1] < 1e-200);
        }

        #[test]
        fn indicator_curves_monotone(sigma in 0.01f64..10.0) {
            let grid: Vec<f64> = (0..200).map(|i| -2.0 + 0.05 * i as f64).collect();
            let rows = indicator_curves(&grid, sigma).unwrap();
            for r in rows.windows(2) {
                prop_assert!(r[1].enkf <= r[0].enkf);
                prop_assert!(r[1].sis <= r[0].sis);
            }
            for r in &rows {
                if r.g <= 0.0 {
                    prop_assert_eq!(r.enkf, 1.0);
                }
            }
        }
    }
}
