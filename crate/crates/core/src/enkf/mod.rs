//! Ensemble Kalman updates for rare-event estimation.
//!
//! Particles are stored as the columns of a `d x J` matrix together with the
//! cached limit-state values. The data misfit is always the rectified value
//! `gtilde = max(0, G)` against the datum 0.

mod localization;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsf::{auxiliary_lsf, LimitState};
use crate::mixtures::Family;
use crate::tempering::{next_sigma, stopping_cv, TemperConfig, TemperState};

pub use localization::{
    cluster_cholesky, localized_moments, weight_matrix_adaptive, weight_matrix_fixed,
    weight_matrix_from_factors, WeightMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Localization {
    #[default]
    Global,
    /// Gaussian distance weights with bandwidth `alpha`.
    Fixed { alpha: f64 },
    /// Distance weights from the covariances of `k` mixture clusters.
    Adaptive { k: usize },
}

impl Localization {
    /// Fixed localization with `alpha = c * d`, the scaling suggested for
    /// high-dimensional problems.
    pub fn scaled_with_dimension(c: f64, d: usize) -> Self {
        Localization::Fixed { alpha: c * d as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Localization::Fixed { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")))
            }
            Localization::Adaptive { k: 0 } => Err(Error::InvalidArgument("adaptive K must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    /// `xi ~ N(0, 1/h)` per particle and step.
    #[default]
    Scaled,
    /// Deterministic update, used to study the continuous-time limit.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub noise: Noise,
    pub localization: Localization,
    /// Relative diagonal loading of cluster covariances.
    pub cov_regularization: f64,
    /// Mixture family used to form clusters for adaptive localization.
    pub cluster_family: Family,
    pub max_iterations: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            noise: Noise::Scaled,
            localization: Localization::Global,
            cov_regularization: 1e-8,
            cluster_family: Family::Gm,
            max_iterations: 200,
        }
    }
}

impl UpdateConfig {
    pub fn with_localization(localization: Localization) -> Self {
        Self {
            localization,
            ..Self::default()
        }
    }
}

/// Conditions worth reporting that do not abort a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunFlag {
    CvUnreachable,
    MaxIterations,
    LowEss,
    KappaCapped,
    ComponentReseeded,
}

impl fmt::Display for RunFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunFlag::CvUnreachable => "cv-unreachable",
            RunFlag::MaxIterations => "max-iterations",
            RunFlag::LowEss => "low-ess",
            RunFlag::KappaCapped => "kappa-capped",
            RunFlag::ComponentReseeded => "component-reseeded",
        })
    }
}

pub(crate) fn push_flag(flags: &mut Vec<RunFlag>, flag: RunFlag) {
    if !flags.contains(&flag) {
        flags.push(flag);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
    g: Vec<f64>,
    gtilde: Vec<f64>,
    pub generation: usize,
}

impl Ensemble {
    /// Wraps the columns of `particles` and evaluates the limit-state on each.
    pub fn from_particles(lsf: &LimitState, particles: DMatrix<f64>) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(Error::InvalidArgument("an ensemble needs at least two particles".into()));
        }
        if particles.nrows() != lsf.dim() {
            return Err(Error::DimensionMismatch {
                expected: lsf.dim(),
                actual: particles.nrows(),
            });
        }
        if particles.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("particle coordinate".into()));
        }
        let g = particles
            .column_iter()
            .map(|c| lsf.eval(c.as_slice()))
            .collect::<Result<Vec<f64>>>()?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("limit-state value".into()));
        }
        let gtilde = g.iter().map(|v| auxiliary_lsf(*v)).collect();
        Ok(Self {
            particles,
            g,
            gtilde,
            generation: 0,
        })
    }

    /// `j` independent standard normal particles.
    pub fn sample_initial<R: Rng + ?Sized>(lsf: &LimitState, j: usize, rng: &mut R) -> Result<Self> {
        let d = lsf.dim();
        let particles = DMatrix::from_fn(d, j, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::from_particles(lsf, particles)
    }

    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    /// Particles as the columns of a `d x J` matrix.
    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.particles.as_slice()[j * d..(j + 1) * d]
    }

    /// Cached `G` values.
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    /// Cached `max(0, G)` values.
    pub fn gtilde(&self) -> &[f64] {
        &self.gtilde
    }

    /// Fraction of particles with `G <= 0`.
    pub fn failure_fraction(&self) -> f64 {
        self.g.iter().filter(|v| **v <= 0.0).count() as f64 / self.size() as f64
    }

    pub fn into_particles(self) -> DMatrix<f64> {
        self.particles
    }
}

/// Mean and (cross-)covariances of an ensemble under particle weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean_u: DVector<f64>,
    pub mean_g: f64,
    /// Variance of `gtilde`.
    pub c_pp: f64,
    /// Cross-covariance of the particles with `gtilde`.
    pub c_up: DVector<f64>,
}

/// Moments under weights `w` that sum to one; uniform weights `1/J` give the
/// empirical moments.
pub(crate) fn weighted_moments(particles: &DMatrix<f64>, gtilde: &[f64], w: &[f64]) -> Moments {
    let d = particles.nrows();
    let mut mean_u = DVector::zeros(d);
    let mut mean_g = 0.0;
    for ((col, wi), gi) in particles.column_iter().zip(w).zip(gtilde) {
        if *wi == 0.0 {
            continue;
        }
        mean_u.axpy(*wi, &col, 1.0);
        mean_g += wi * gi;
    }
    let mut c_pp = 0.0;
    let mut c_up = DVector::zeros(d);
    for ((col, wi), gi) in particles.column_iter().zip(w).zip(gtilde) {
        if *wi == 0.0 {
            continue;
        }
        let dg = gi - mean_g;
        c_pp += wi * dg * dg;
        for i in 0..d {
            c_up[i] += wi * (col[i] - mean_u[i]) * dg;
        }
    }
    Moments {
        mean_u,
        mean_g,
        c_pp,
        c_up,
    }
}

/// Empirical moments with the `1/J` normalization.
pub fn empirical_moments(ens: &Ensemble) -> Moments {
    let j = ens.size();
    let w = vec![1.0 / j as f64; j];
    weighted_moments(&ens.particles, &ens.gtilde, &w)
}

fn draw_noise<R: Rng + ?Sized>(j: usize, h: f64, noise: Noise, rng: &mut R) -> Vec<f64> {
    match noise {
        Noise::Scaled => {
            let sd = (1.0 / h).sqrt();
            (0..j).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
        }
        Noise::None => vec![0.0; j],
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0) || h.is_nan() {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    Ok(())
}

/// `u_j += C_up (C_pp + 1/h)^{-1} (xi_j - gtilde_j)` with shared moments.
pub fn enkf_step_global<R: Rng + ?Sized>(
    ens: &Ensemble,
    lsf: &LimitState,
    h: f64,
    cfg: &UpdateConfig,
    rng: &mut R,
) -> Result<Ensemble> {
    check_step(h)?;
    let j = ens.size();
    let xi = draw_noise(j, h, cfg.noise, rng);
    let m = empirical_moments(ens);
    let denom = m.c_pp + 1.0 / h;
    let mut next = ens.particles.clone();
    for (k, mut col) in next.column_iter_mut().enumerate() {
        let factor = (xi[k] - ens.gtilde[k]) / denom;
        col.axpy(factor, &m.c_up, 1.0);
    }
    let mut out = Ensemble::from_particles(lsf, next)?;
    out.generation = ens.generation + 1;
    Ok(out)
}

/// Per-particle update with the moments localized by column `j` of `w`.
pub fn enkf_step_local<R: Rng + ?Sized>(
    ens: &Ensemble,
    lsf: &LimitState,
    h: f64,
    w: &WeightMatrix,
    cfg: &UpdateConfig,
    rng: &mut R,
) -> Result<Ensemble> {
    check_step(h)?;
    let j = ens.size();
    if w.size() != j {
        return Err(Error::DimensionMismatch {
            expected: j,
            actual: w.size(),
        });
    }
    let xi = draw_noise(j, h, cfg.noise, rng);
    let mut next = ens.particles.clone();
    for (k, mut col) in next.column_iter_mut().enumerate() {
        let m = localized_moments(ens, w, k);
        let factor = (xi[k] - ens.gtilde[k]) / (m.c_pp + 1.0 / h);
        col.axpy(factor, &m.c_up, 1.0);
    }
    let mut out = Ensemble::from_particles(lsf, next)?;
    out.generation = ens.generation + 1;
    Ok(out)
}

/// Outcome of the tempered EnKF loop.
#[derive(Debug, Clone)]
pub struct EnkfRun {
    pub ensemble: Ensemble,
    pub temper: TemperState,
    /// Limit-state evaluations, `J * (levels + 1)`.
    pub eval_count: usize,
    pub flags: Vec<RunFlag>,
}

impl EnkfRun {
    pub fn levels(&self) -> usize {
        self.temper.history.len()
    }
}

/// Runs the tempered EnKF from a standard normal ensemble until the
/// failure fraction `p` satisfies `sqrt((1 - p)/p) < delta_target`.
///
/// The stopping rule is also checked on the initial ensemble, so a problem
/// whose failure domain is not rare enough takes no update at all.
pub fn run_enkf<R: Rng + ?Sized>(
    lsf: &LimitState,
    j: usize,
    cfg: &UpdateConfig,
    tcfg: &TemperConfig,
    rng: &mut R,
) -> Result<EnkfRun> {
    cfg.localization.validate()?;
    let ensemble = Ensemble::sample_initial(lsf, j, rng)?;
    run_enkf_from(lsf, ensemble, cfg, tcfg, rng)
}

/// [`run_enkf`] from a given initial ensemble.
pub fn run_enkf_from<R: Rng + ?Sized>(
    lsf: &LimitState,
    mut ens: Ensemble,
    cfg: &UpdateConfig,
    tcfg: &TemperConfig,
    rng: &mut R,
) -> Result<EnkfRun> {
    cfg.localization.validate()?;
    let j = ens.size();
    let mut eval_count = j;
    let mut temper = TemperState::new();
    let mut flags = Vec::new();
    loop {
        if stopping_cv(&ens.gtilde) < tcfg.delta_target {
            break;
        }
        if temper.step_index >= cfg.max_iterations {
            push_flag(&mut flags, RunFlag::MaxIterations);
            break;
        }
        let ns = next_sigma(&ens.gtilde, &temper, tcfg)?;
        if ns.cv_unreachable {
            push_flag(&mut flags, RunFlag::CvUnreachable);
        }
        ens = match cfg.localization {
            Localization::Global => enkf_step_global(&ens, lsf, ns.h, cfg, rng)?,
            Localization::Fixed { alpha } => {
                let w = weight_matrix_fixed(&ens, alpha)?;
                enkf_step_local(&ens, lsf, ns.h, &w, cfg, rng)?
            }
            Localization::Adaptive { k } => {
                let w = weight_matrix_adaptive(&ens, k, cfg.cluster_family, cfg.cov_regularization, rng)?;
                enkf_step_local(&ens, lsf, ns.h, &w, cfg, rng)?
            }
        };
        eval_count += j;
        temper.advance(ns.h, stopping_cv(&ens.gtilde))?;
    }
    Ok(EnkfRun {
        ensemble: ens,
        temper,
        eval_count,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::lsf::{problem, AffineLsf};
    use crate::rng_from_seed;
    use proptest::prelude::*;

    fn identity_1d() -> LimitState {
        let model = AffineLsf::new(vec![1.0], 0.0).unwrap();
        LimitState::from_model("identity", std::sync::Arc::new(model)).unwrap()
    }

    fn ensemble_1d(lsf: &LimitState, xs: &[f64]) -> Ensemble {
        Ensemble::from_particles(lsf, DMatrix::from_row_slice(1, xs.len(), xs)).unwrap()
    }

    fn noise_free() -> UpdateConfig {
        UpdateConfig {
            noise: Noise::None,
            ..UpdateConfig::default()
        }
    }

    #[test]
    fn moments_examples() {
        let lsf = identity_1d();
        let ens = ensemble_1d(&lsf, &[0.0, 2.0]);
        let m = empirical_moments(&ens);
        assert_eq!((m.mean_u[0], m.mean_g, m.c_pp, m.c_up[0]), (1.0, 1.0, 1.0, 1.0));
        let ens = ensemble_1d(&lsf, &[1.5, 1.5, 1.5]);
        let m = empirical_moments(&ens);
        assert_eq!((m.c_pp, m.c_up[0]), (0.0, 0.0));
    }

    #[test]
    fn global_step_example() {
        let lsf = identity_1d();
        let ens = ensemble_1d(&lsf, &[0.0, 2.0]);
        let mut rng = rng_from_seed(0);
        let next = enkf_step_global(&ens, &lsf, 1.0, &noise_free(), &mut rng).unwrap();
        assert_eq!(next.particles().as_slice(), &[0.0, 1.0]);
        assert_eq!(next.generation, 1);
        assert!(enkf_step_global(&ens, &lsf, 0.0, &noise_free(), &mut rng).is_err());
    }

    #[test]
    fn identical_ensemble_is_unchanged_even_with_noise() {
        let lsf = identity_1d();
        let ens = ensemble_1d(&lsf, &[0.7; 5]);
        let mut rng = rng_from_seed(1);
        let next = enkf_step_global(&ens, &lsf, 0.5, &UpdateConfig::default(), &mut rng).unwrap();
        assert_eq!(next.particles(), ens.particles());
    }

    #[test]
    fn uniform_local_step_is_bitwise_global() {
        let lsf = problem("parabolic").unwrap();
        let mut rng = rng_from_seed(2);
        let ens = Ensemble::sample_initial(&lsf, 50, &mut rng).unwrap();
        let w = WeightMatrix::uniform(50);
        let cfg = UpdateConfig::default();
        let a = enkf_step_global(&ens, &lsf, 0.3, &cfg, &mut rng_from_seed(9)).unwrap();
        let b = enkf_step_local(&ens, &lsf, 0.3, &w, &cfg, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_stop_takes_no_steps() {
        // G(u) = u_1 + 0.5 fails with probability ~0.31 > 1/101
        let lsf = AffineLsf::new(vec![1.0, 0.0], -0.5).unwrap().into_limit_state().unwrap();
        let tcfg = TemperConfig::new(10.0).unwrap();
        let run = run_enkf(&lsf, 500, &UpdateConfig::default(), &tcfg, &mut rng_from_seed(4)).unwrap();
        assert_eq!(run.levels(), 0);
        assert_eq!(run.eval_count, 500);
    }

    #[test]
    fn affine_run_reaches_target_fraction() {
        let lsf = AffineLsf::new(vec![1.0, 0.0, 0.0], -2.0).unwrap().into_limit_state().unwrap();
        let tcfg = TemperConfig::new(1.0).unwrap();
        let run = run_enkf(&lsf, 2000, &UpdateConfig::default(), &tcfg, &mut rng_from_seed(5)).unwrap();
        assert!(run.ensemble.failure_fraction() >= 0.5);
        assert!(run.levels() >= 1);
        assert_eq!(run.eval_count, 2000 * (run.levels() + 1));
        let sig = run.temper.sigmas();
        for s in sig.windows(2) {
            assert!(s[1] < s[0]);
        }
        assert!(run.temper.history.iter().all(|s| s.h > 0.0));
    }

    #[test]
    fn max_iteration_guard_flags() {
        let lsf = problem("convex").unwrap();
        let tcfg = TemperConfig::new(0.25).unwrap();
        let cfg = UpdateConfig {
            max_iterations: 1,
            ..UpdateConfig::default()
        };
        let run = run_enkf(&lsf, 200, &cfg, &tcfg, &mut rng_from_seed(6)).unwrap();
        assert!(run.flags.contains(&RunFlag::MaxIterations));
        assert_eq!(run.levels(), 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let lsf = problem("series").unwrap();
        let tcfg = TemperConfig::new(2.0).unwrap();
        let cfg = UpdateConfig::with_localization(Localization::Fixed { alpha: 0.25 });
        let a = run_enkf(&lsf, 300, &cfg, &tcfg, &mut rng_from_seed(8)).unwrap();
        let b = run_enkf(&lsf, 300, &cfg, &tcfg, &mut rng_from_seed(8)).unwrap();
        assert_eq!(a.ensemble, b.ensemble);
        assert_eq!(a.temper, b.temper);
    }

    #[test]
    fn adaptive_localization_runs() {
        let lsf = problem("series").unwrap();
        let tcfg = TemperConfig::new(2.0).unwrap();
        let cfg = UpdateConfig::with_localization(Localization::Adaptive { k: 4 });
        let run = run_enkf(&lsf, 500, &cfg, &tcfg, &mut rng_from_seed(12)).unwrap();
        assert!(run.ensemble.failure_fraction() >= 1.0 / 5.0);
    }

    #[test]
    fn localization_validation() {
        assert!(Localization::Fixed { alpha: 0.0 }.validate().is_err());
        assert!(Localization::Adaptive { k: 0 }.validate().is_err());
        assert_eq!(Localization::scaled_with_dimension(1.0, 150), Localization::Fixed { alpha: 150.0 });
        let s = serde_json::to_string(&Localization::Fixed { alpha: 2.0 }).unwrap();
        assert_eq!(s, r#"{"mode":"fixed","alpha":2.0}"#);
    }

    #[test]
    fn smaller_alpha_moves_particles_less() {
        let lsf = problem("parabolic").unwrap();
        let ens = Ensemble::sample_initial(&lsf, 200, &mut rng_from_seed(3)).unwrap();
        let mut disp = [0.0; 2];
        for (slot, alpha) in [0.25, 2.0].into_iter().enumerate() {
            let w = weight_matrix_fixed(&ens, alpha).unwrap();
            for seed in 0..100 {
                let next = enkf_step_local(&ens, &lsf, 0.05, &w, &UpdateConfig::default(), &mut rng_from_seed(seed)).unwrap();
                disp[slot] += (next.particles() - ens.particles()).norm();
            }
        }
        assert!(disp[0] < disp[1], "{disp:?}");
    }

    fn affine_lsf(d: usize) -> LimitState {
        let mut a = vec![0.0; d];
        a[0] = 1.0;
        AffineLsf::new(a, -2.0).unwrap().into_limit_state().unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn noise_free_steps_stay_in_initial_affine_span(
            seed in 0u64..1000, d in 4usize..8, j in 2usize..4, steps in 1usize..6
        ) {
            // J < d, so the span is a proper affine subspace
            let lsf = affine_lsf(d);
            let mut rng = rng_from_seed(seed);
            let ens0 = Ensemble::sample_initial(&lsf, j, &mut rng).unwrap();
            let mean0 = ens0.particles().column_mean();
            let mut centered = ens0.particles().clone();
            for mut c in centered.column_iter_mut() {
                c -= &mean0;
            }
            let q = centered.clone().qr().q();
            let mut ens = ens0;
            for _ in 0..steps {
                ens = enkf_step_global(&ens, &lsf, 0.5, &noise_free(), &mut rng).unwrap();
                for c in ens.particles().column_iter() {
                    let r = c - &mean0;
                    let resid = &r - &q * (q.transpose() * &r);
                    prop_assert!(resid.norm() <= 1e-8);
                }
            }
        }

        #[test]
        fn noise_free_failure_particles_are_frozen(seed in 0u64..1000, h in 0.01f64..5.0) {
            let lsf = affine_lsf(3);
            let mut rng = rng_from_seed(seed);
            // shift half of the particles into the failure domain
            let mut p = DMatrix::from_fn(3, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
            for j in 0..20 {
                p[(0, j)] -= 3.0;
            }
            let mut ens = Ensemble::from_particles(&lsf, p).unwrap();
            for _ in 0..3 {
                let next = enkf_step_global(&ens, &lsf, h, &noise_free(), &mut rng).unwrap();
                for k in 0..ens.size() {
                    if ens.gtilde()[k] == 0.0 {
                        prop_assert_eq!(next.particle(k), ens.particle(k));
                    }
                }
                let w = weight_matrix_fixed(&ens, 1.0).unwrap();
                let local = enkf_step_local(&ens, &lsf, h, &w, &noise_free(), &mut rng).unwrap();
                for k in 0..ens.size() {
                    if ens.gtilde()[k] == 0.0 {
                        prop_assert_eq!(local.particle(k), ens.particle(k));
                    }
                }
                ens = next;
            }
        }

        #[test]
        fn cache_matches_fresh_evaluation(seed in 0u64..1000, which in 0usize..3, h in 0.01f64..3.0) {
            let lsf = problem(["convex", "parabolic", "series"][which]).unwrap();
            let mut rng = rng_from_seed(seed);
            let ens = Ensemble::sample_initial(&lsf, 30, &mut rng).unwrap();
            let next = enkf_step_global(&ens, &lsf, h, &UpdateConfig::default(), &mut rng).unwrap();
            let w = weight_matrix_fixed(&ens, 0.5).unwrap();
            let local = enkf_step_local(&ens, &lsf, h, &w, &UpdateConfig::default(), &mut rng).unwrap();
            for e in [&next, &local] {
                for k in 0..e.size() {
                    let g = lsf.eval(e.particle(k)).unwrap();
                    prop_assert_eq!(e.g()[k], g);
                    prop_assert_eq!(e.gtilde()[k], auxiliary_lsf(g));
                }
            }
        }

        #[test]
        fn variance_is_nonnegative(seed in 0u64..1000) {
            let lsf = problem("convex").unwrap();
            let ens = Ensemble::sample_initial(&lsf, 10, &mut rng_from_seed(seed)).unwrap();
            prop_assert!(empirical_moments(&ens).c_pp >= 0.0);
        }
    }
}
