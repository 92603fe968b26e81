//! Limit-state functions: the abstraction, the benchmark problems and a
//! name-based registry.
//!
//! A state `u` fails when `G(u) <= 0`. Inputs are always standard normal.

mod affine;
mod benchmarks;
pub mod diffusion;

use std::fmt;
use std::sync::Arc;

use crate::enkf::Localization;
use crate::error::{Error, Result};

pub use affine::{form_probability, mlfp, AffineLsf};
pub use benchmarks::{convex, parabolic, series};
pub use diffusion::{kl_eigenpairs, DiffusionProblem, KlEigenpairs};

/// A deterministic map `R^d -> R`. Implementations hold only read-only state
/// so one instance can be evaluated from many threads.
pub trait LimitStateModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Evaluates `G(u)`; `u.len() == self.dim()` is checked by the caller.
    fn value(&self, u: &[f64]) -> Result<f64>;
}

/// A limit-state function together with metadata used by the harness.
#[derive(Clone)]
pub struct LimitState {
    pub name: String,
    pub reference_pf: Option<f64>,
    pub recommended_mixtures: usize,
    pub recommended_localization: Localization,
    model: Arc<dyn LimitStateModel>,
}

impl fmt::Debug for LimitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LimitState")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("reference_pf", &self.reference_pf)
            .finish()
    }
}

impl LimitState {
    pub fn new(
        name: impl Into<String>,
        model: Arc<dyn LimitStateModel>,
        reference_pf: Option<f64>,
        recommended_mixtures: usize,
        recommended_localization: Localization,
    ) -> Result<Self> {
        if model.dim() == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        if let Some(p) = reference_pf {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "reference probability {p} outside (0, 1)"
                )));
            }
        }
        if recommended_mixtures == 0 {
            return Err(Error::InvalidArgument("mixture count must be >= 1".into()));
        }
        Ok(Self {
            name: name.into(),
            reference_pf,
            recommended_mixtures,
            recommended_localization,
            model,
        })
    }

    /// Wraps a model with neutral metadata (no reference, one global component).
    pub fn from_model(name: impl Into<String>, model: Arc<dyn LimitStateModel>) -> Result<Self> {
        Self::new(name, model, None, 1, Localization::Global)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `G(u)`.
    pub fn eval(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: u.len(),
            });
        }
        self.model.value(u)
    }

    /// `max(0, G(u))`.
    pub fn eval_auxiliary(&self, u: &[f64]) -> Result<f64> {
        self.eval(u).map(auxiliary_lsf)
    }

    pub fn with_reference_pf(mut self, pf: Option<f64>) -> Result<Self> {
        if let Some(p) = pf {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "reference probability {p} outside (0, 1)"
                )));
            }
        }
        self.reference_pf = pf;
        Ok(self)
    }
}

/// Free-function form of [`LimitState::eval`].
pub fn eval_lsf(lsf: &LimitState, u: &[f64]) -> Result<f64> {
    lsf.eval(u)
}

/// The rectified limit-state `max(0, g)`; zero on the whole failure domain.
pub fn auxiliary_lsf(g: f64) -> f64 {
    if g > 0.0 {
        g
    } else {
        0.0
    }
}

/// Looks up a problem by name: `convex`, `parabolic`, `series`,
/// `diffusion1d`, or `affine(a1,...,ad,b)` for `G(u) = a.u - b`.
pub fn problem(name: &str) -> Result<LimitState> {
    let trimmed = name.trim();
    match trimmed {
        "convex" => convex(),
        "parabolic" => parabolic(),
        "series" => series(),
        "diffusion1d" => DiffusionProblem::benchmark()?.into_limit_state(),
        _ => {
            if let Some(args) = trimmed
                .strip_prefix("affine(")
                .and_then(|s| s.strip_suffix(')'))
            {
                let values: std::result::Result<Vec<f64>, _> =
                    args.split(',').map(|s| s.trim().parse::<f64>()).collect();
                let values = values.map_err(|_| Error::UnknownProblem(name.to_string()))?;
                if values.len() < 2 {
                    return Err(Error::UnknownProblem(name.to_string()));
                }
                let (a, b) = values.split_at(values.len() - 1);
                AffineLsf::new(a.to_vec(), b[0])?.into_limit_state()
            } else {
                Err(Error::UnknownProblem(name.to_string()))
            }
        }
    }
}
