//! Mixture densities for the importance-sampling step and for clustering in
//! the adaptive localization: Gaussian mixtures (GM) and mixtures of von
//! Mises-Fisher-Nakagami distributions (vMFNM), both fitted by EM.
//!
//! Samples are passed as `d x n` matrices, one sample per column.

pub mod bessel;
mod gaussian;
mod vmfnm;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, std_normal_logpdf};

pub use gaussian::GaussianMixture;
pub use vmfnm::{kappa_mle, nakagami_logpdf, shape_mle, VmfnmMixture, KAPPA_MAX, SHAPE_MAX, SHAPE_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Gm,
    Vmfnm,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gm => "gm",
            Family::Vmfnm => "vmfnm",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gm" | "gauss" | "gaussian" => Ok(Family::Gm),
            "vmfnm" | "vmfn" => Ok(Family::Vmfnm),
            other => Err(Error::InvalidArgument(format!("unknown mixture family '{other}'"))),
        }
    }
}

/// EM settings shared by both families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Stop when the relative change of the log-likelihood drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Diagonal loading `reg * trace(C) / d` of every GM covariance.
    pub reg: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            reg: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Log-likelihood before each M-step, then at the returned parameters.
    pub loglik_history: Vec<f64>,
    /// Responsibility mass per component at the returned parameters.
    pub component_mass: Vec<f64>,
    /// Components that had to be re-seeded after emptying out.
    pub reseeded: usize,
    /// A concentration hit its cap because the directions collapsed.
    pub kappa_capped: bool,
}

/// A fitted density on `R^d`. Immutable after construction, so one model can
/// be shared between threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelDocument", try_from = "ModelDocument")]
pub enum MixtureModel {
    Gaussian(GaussianMixture),
    Vmfnm(VmfnmMixture),
}

impl MixtureModel {
    pub fn family(&self) -> Family {
        match self {
            MixtureModel::Gaussian(_) => Family::Gm,
            MixtureModel::Vmfnm(_) => Family::Vmfnm,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MixtureModel::Gaussian(m) => m.dim(),
            MixtureModel::Vmfnm(m) => m.dim(),
        }
    }

    pub fn n_components(&self) -> usize {
        self.weights().len()
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            MixtureModel::Gaussian(m) => m.weights(),
            MixtureModel::Vmfnm(m) => m.weights(),
        }
    }

    /// Log-density with respect to Lebesgue measure on `R^d`.
    pub fn logpdf(&self, u: &[f64]) -> Result<f64> {
        match self {
            MixtureModel::Gaussian(m) => m.logpdf(u),
            MixtureModel::Vmfnm(m) => m.logpdf(u),
        }
    }

    /// Per-component `ln pi_k + ln p_k(u)`, up to a term shared by all
    /// components. Enough for responsibilities.
    pub fn joint_logpdfs(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            MixtureModel::Gaussian(m) => m.joint_logpdfs(u, out),
            MixtureModel::Vmfnm(m) => m.joint_logpdfs(u, out),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            MixtureModel::Gaussian(m) => Ok(m.sample(rng)),
            MixtureModel::Vmfnm(m) => m.sample(rng),
        }
    }

    /// `n` draws as the columns of a `d x n` matrix.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim(), n);
        for j in 0..n {
            let x = self.sample(rng)?;
            out.column_mut(j).copy_from_slice(&x);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Fits `k` components of the given family by EM.
pub fn fit_mixture<R: Rng + ?Sized>(
    family: Family,
    samples: &DMatrix<f64>,
    k: usize,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<(MixtureModel, FitReport)> {
    match family {
        Family::Gm => {
            let (m, r) = GaussianMixture::fit(samples, k, opts, rng)?;
            Ok((MixtureModel::Gaussian(m), r))
        }
        Family::Vmfnm => {
            let (m, r) = VmfnmMixture::fit(samples, k, opts, rng)?;
            Ok((MixtureModel::Vmfnm(m), r))
        }
    }
}

/// Importance weight `ln phi_d(u) - ln p(u)`.
pub fn mixture_logweight(model: &MixtureModel, u: &[f64]) -> Result<f64> {
    Ok(std_normal_logpdf(u) - model.logpdf(u)?)
}

/// Hard assignment of every column to its most responsible component; ties
/// go to the lowest index.
pub fn cluster_responsibilities(model: &MixtureModel, samples: &DMatrix<f64>) -> Result<Vec<usize>> {
    let mut buf = vec![0.0; model.n_components()];
    samples
        .column_iter()
        .map(|col| {
            model.joint_logpdfs(col.as_slice(), &mut buf)?;
            let mut best = 0;
            for (k, v) in buf.iter().enumerate() {
                if *v > buf[best] {
                    best = k;
                }
            }
            Ok(best)
        })
        .collect()
}

/// k-means++ seeding: the first seed uniformly, each further seed with
/// probability proportional to its squared distance to the nearest seed.
pub(crate) fn kmeans_pp<R: Rng + ?Sized>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.ncols();
    let mut seeds = vec![rng.random_range(0..n)];
    let mut dist = vec![f64::INFINITY; n];
    while seeds.len() < k {
        let last = points.column(*seeds.last().expect("nonempty"));
        for (j, col) in points.column_iter().enumerate() {
            dist[j] = dist[j].min((col - last).norm_squared());
        }
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (j, d) in dist.iter().enumerate() {
                if target < *d {
                    pick = j;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
    }
    seeds
}

/// Responsibilities and per-row log-likelihood from per-component joint
/// log-densities stored row-wise (`n x K`). Returns the total log-likelihood.
pub(crate) fn normalize_responsibilities(logp: &mut DMatrix<f64>, row_ll: &mut [f64]) -> f64 {
    let k = logp.ncols();
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..logp.nrows() {
        for c in 0..k {
            buf[c] = logp[(i, c)];
        }
        let lse = log_sum_exp(&buf);
        row_ll[i] = lse;
        total += lse;
        for c in 0..k {
            logp[(i, c)] = (buf[c] - lse).exp();
        }
    }
    total
}

/// Component index drawn from the mixture weights.
pub(crate) fn draw_component<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let mut t = rng.random::<f64>();
    for (k, w) in weights.iter().enumerate() {
        if t < *w {
            return k;
        }
        t -= w;
    }
    weights.len() - 1
}

pub(crate) fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Fit("mixture needs at least one component".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Fit("mixture weights must be nonnegative".into()));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Fit(format!("mixture weights sum to {s}")));
    }
    Ok(())
}

/// JSON layout of a fitted model: family tag, sizes and flat parameter
/// arrays (row-major per component).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
enum ModelDocument {
    Gm {
        k: usize,
        dim: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        covariances: Vec<f64>,
    },
    Vmfnm {
        k: usize,
        dim: usize,
        weights: Vec<f64>,
        directions: Vec<f64>,
        kappas: Vec<f64>,
        shapes: Vec<f64>,
        spreads: Vec<f64>,
    },
}

impl From<MixtureModel> for ModelDocument {
    fn from(m: MixtureModel) -> Self {
        match m {
            MixtureModel::Gaussian(g) => ModelDocument::Gm {
                k: g.weights().len(),
                dim: g.dim(),
                weights: g.weights().to_vec(),
                means: g.means().iter().flat_map(|m| m.iter().copied()).collect(),
                covariances: g
                    .covariances()
                    .iter()
                    .flat_map(|c| c.transpose().iter().copied().collect::<Vec<_>>())
                    .collect(),
            },
            MixtureModel::Vmfnm(v) => ModelDocument::Vmfnm {
                k: v.weights().len(),
                dim: v.dim(),
                weights: v.weights().to_vec(),
                directions: v.directions().iter().flat_map(|m| m.iter().copied()).collect(),
                kappas: v.kappas().to_vec(),
                shapes: v.shapes().to_vec(),
                spreads: v.spreads().to_vec(),
            },
        }
    }
}

impl TryFrom<ModelDocument> for MixtureModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        match doc {
            ModelDocument::Gm {
                k,
                dim,
                weights,
                means,
                covariances,
            } => {
                if weights.len() != k || means.len() != k * dim || covariances.len() != k * dim * dim {
                    return Err(Error::Fit("inconsistent GM document sizes".into()));
                }
                let means = means.chunks(dim).map(nalgebra::DVector::from_column_slice).collect();
                let covs = covariances
                    .chunks(dim * dim)
                    .map(|c| DMatrix::from_row_slice(dim, dim, c))
                    .collect();
                Ok(MixtureModel::Gaussian(GaussianMixture::new(weights, means, covs)?))
            }
            ModelDocument::Vmfnm {
                k,
                dim,
                weights,
                directions,
                kappas,
                shapes,
                spreads,
            } => {
                if weights.len() != k
                    || directions.len() != k * dim
                    || kappas.len() != k
                    || shapes.len() != k
                    || spreads.len() != k
                {
                    return Err(Error::Fit("inconsistent vMFNM document sizes".into()));
                }
                let dirs = directions
                    .chunks(dim)
                    .map(nalgebra::DVector::from_column_slice)
                    .collect();
                Ok(MixtureModel::Vmfnm(VmfnmMixture::new(weights, dirs, kappas, shapes, spreads)?))
            }
        }
    }
}
