//! Importance-sampling estimate from the fitted density, and the complete
//! single-run pipeline: tempered EnKF, mixture fit, importance sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::enkf::{push_flag, run_enkf, RunFlag, UpdateConfig};
use crate::error::{Error, Result};
use crate::lsf::LimitState;
use crate::mixtures::{fit_mixture, mixture_logweight, Family, FitOptions, MixtureModel};
use crate::tempering::TemperConfig;

/// Fraction of the sample size below which the effective sample size of the
/// importance weights is flagged.
pub const LOW_ESS_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsEstimate {
    pub pf: f64,
    pub n_samples: usize,
    pub n_failed: usize,
    /// Kish effective sample size of the weights `1{G <= 0} phi / p`.
    pub ess: f64,
    /// Largest single weight over the weight sum; 0 without failures.
    pub max_weight_share: f64,
}

impl IsEstimate {
    pub fn low_ess(&self) -> bool {
        self.ess < LOW_ESS_FRACTION * self.n_samples as f64
    }
}

/// `(1/n) sum 1{G(u_j) <= 0} phi_d(u_j) / p(u_j)` over `n` fresh draws from
/// the model.
pub fn is_estimate<R: Rng + ?Sized>(
    lsf: &LimitState,
    model: &MixtureModel,
    n: usize,
    rng: &mut R,
) -> Result<IsEstimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if model.dim() != lsf.dim() {
        return Err(Error::DimensionMismatch {
            expected: lsf.dim(),
            actual: model.dim(),
        });
    }
    let mut weights = Vec::new();
    for _ in 0..n {
        let u = model.sample(rng)?;
        if lsf.eval(&u)? <= 0.0 {
            let w = mixture_logweight(model, &u)?.exp();
            if !w.is_finite() {
                return Err(Error::NonFinite("importance weight".into()));
            }
            weights.push(w);
        }
    }
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let max = weights.iter().cloned().fold(0.0, f64::max);
    let (ess, share) = if sum > 0.0 { (sum * sum / sum_sq, max / sum) } else { (0.0, 0.0) };
    Ok(IsEstimate {
        pf: sum / n as f64,
        n_samples: n,
        n_failed: weights.len(),
        ess,
        max_weight_share: share,
    })
}

/// Everything that defines one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Ensemble size.
    pub j: usize,
    pub update: UpdateConfig,
    pub temper: TemperConfig,
    pub family: Family,
    /// Mixture components fitted to the final ensemble.
    pub k: usize,
    /// Importance samples; `None` uses `j`.
    pub n_is: Option<usize>,
    pub fit: FitOptions,
}

impl PipelineConfig {
    pub fn new(j: usize, delta_target: f64, family: Family, k: usize) -> Result<Self> {
        let cfg = Self {
            j,
            update: UpdateConfig::default(),
            temper: TemperConfig::new(delta_target)?,
            family,
            k,
            n_is: None,
            fit: FitOptions::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.j < 2 {
            return Err(Error::InvalidArgument("J must be >= 2".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if self.n_is == Some(0) {
            return Err(Error::InvalidArgument("importance sample count must be >= 1".into()));
        }
        self.update.localization.validate()?;
        TemperConfig::new(self.temper.delta_target)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub pf_estimate: f64,
    pub sigma_schedule: Vec<f64>,
    pub n_levels: usize,
    /// Limit-state evaluations including the importance-sampling batch.
    pub eval_count: usize,
    pub failure_fraction_final: f64,
    pub model: MixtureModel,
    pub seed: Option<u64>,
    pub flags: Vec<RunFlag>,
    pub is: IsEstimate,
}

/// Runs the tempered EnKF, fits the mixture to the final ensemble and
/// returns the importance-sampling estimate from fresh model draws.
pub fn estimate_failure_probability<R: Rng + ?Sized>(
    lsf: &LimitState,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<RunResult> {
    cfg.validate()?;
    let run = run_enkf(lsf, cfg.j, &cfg.update, &cfg.temper, rng)?;
    let mut flags = run.flags.clone();
    let (model, report) = fit_mixture(cfg.family, run.ensemble.particles(), cfg.k, &cfg.fit, rng)?;
    if report.kappa_capped {
        push_flag(&mut flags, RunFlag::KappaCapped);
    }
    if report.reseeded > 0 {
        push_flag(&mut flags, RunFlag::ComponentReseeded);
    }
    let n_is = cfg.n_is.unwrap_or(cfg.j);
    let is = is_estimate(lsf, &model, n_is, rng)?;
    if is.low_ess() {
        push_flag(&mut flags, RunFlag::LowEss);
    }
    Ok(RunResult {
        pf_estimate: is.pf,
        sigma_schedule: run.temper.sigmas(),
        n_levels: run.levels(),
        eval_count: run.eval_count + n_is,
        failure_fraction_final: run.ensemble.failure_fraction(),
        model,
        seed: None,
        flags,
        is,
    })
}
