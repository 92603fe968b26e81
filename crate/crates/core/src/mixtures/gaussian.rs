use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_weights, draw_component, kmeans_pp, normalize_responsibilities, FitOptions, FitReport};
use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    /// Lower Cholesky factors of the covariances.
    chol: Vec<DMatrix<f64>>,
    /// `ln pi_k - d/2 ln(2 pi) - ln det(L_k)`
    log_norm: Vec<f64>,
}

/// Solves `L y = b` in place for lower-triangular `L`.
fn forward_solve(l: &DMatrix<f64>, b: &mut [f64]) {
    let d = b.len();
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        check_weights(&weights)?;
        let k = weights.len();
        if means.len() != k || covariances.len() != k {
            return Err(Error::Fit("one mean and covariance per component".into()));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Fit("dimension must be >= 1".into()));
        }
        let mut chol = Vec::with_capacity(k);
        let mut log_norm = Vec::with_capacity(k);
        for (c, (m, cov)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d || cov.nrows() != d || cov.ncols() != d {
                return Err(Error::Fit(format!("component {c} has inconsistent dimensions")));
            }
            if m.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Fit(format!("component {c} has non-finite parameters")));
            }
            let l = nalgebra::Cholesky::new(cov.clone())
                .ok_or_else(|| Error::Fit(format!("covariance {c} is not positive definite")))?
                .unpack();
            let log_det_half: f64 = l.diagonal().iter().map(|x| x.ln()).sum();
            log_norm.push(weights[c].ln() - 0.5 * d as f64 * LN_2PI - log_det_half);
            chol.push(l);
        }
        Ok(Self {
            weights,
            means,
            covariances,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn joint_logpdfs(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        if u.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: u.len(),
            });
        }
        let mut buf = vec![0.0; d];
        for (k, o) in out.iter_mut().enumerate() {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = u[i] - self.means[k][i];
            }
            forward_solve(&self.chol[k], &mut buf);
            let q: f64 = buf.iter().map(|x| x * x).sum();
            *o = self.log_norm[k] - 0.5 * q;
        }
        Ok(())
    }

    pub fn logpdf(&self, u: &[f64]) -> Result<f64> {
        let mut buf = vec![0.0; self.weights.len()];
        self.joint_logpdfs(u, &mut buf)?;
        Ok(log_sum_exp(&buf))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = draw_component(&self.weights, rng);
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.means[k] + &self.chol[k] * z).as_slice().to_vec()
    }

    /// EM fit. `K = 1` is the closed-form maximum-likelihood estimate.
    pub fn fit<R: Rng + ?Sized>(
        samples: &DMatrix<f64>,
        k: usize,
        opts: &FitOptions,
        rng: &mut R,
    ) -> Result<(Self, FitReport)> {
        let (d, n) = samples.shape();
        if k == 0 {
            return Err(Error::Fit("K must be >= 1".into()));
        }
        if n < k * (d + 1) {
            return Err(Error::Fit(format!("{n} samples are too few for {k} components in dimension {d}")));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("samples".into()));
        }
        let uniform = vec![1.0 / n as f64; n];
        let (global_mean, global_cov) = weighted_moments(samples, &uniform, opts.reg);

        if k == 1 {
            let model = Self::new(vec![1.0], vec![global_mean], vec![global_cov])?;
            let ll = total_loglik(&model, samples)?;
            let report = FitReport {
                iterations: 0,
                log_likelihood: ll,
                converged: true,
                loglik_history: vec![ll],
                component_mass: vec![n as f64],
                reseeded: 0,
                kappa_capped: false,
            };
            return Ok((model, report));
        }

        let seeds = kmeans_pp(samples, k, rng);
        let mut means: Vec<DVector<f64>> = seeds.iter().map(|&s| samples.column(s).into_owned()).collect();
        let mut covs = vec![global_cov.clone(); k];
        let mut weights = vec![1.0 / k as f64; k];
        let mut reseeded = vec![false; k];
        let mut history = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut logp = DMatrix::zeros(n, k);
        let mut row_ll = vec![0.0; n];
        let mut buf = vec![0.0; k];
        let mut model;

        loop {
            model = Self::new(weights.clone(), means.clone(), covs.clone())?;
            for (i, col) in samples.column_iter().enumerate() {
                model.joint_logpdfs(col.as_slice(), &mut buf)?;
                for c in 0..k {
                    logp[(i, c)] = buf[c];
                }
            }
            let ll = normalize_responsibilities(&mut logp, &mut row_ll);
            if !ll.is_finite() {
                return Err(Error::Fit("log-likelihood is not finite".into()));
            }
            if let Some(prev) = history.last() {
                if ((ll - prev) as f64).abs() <= opts.tol * f64::abs(*prev) {
                    history.push(ll);
                    converged = true;
                    break;
                }
            }
            history.push(ll);
            if iterations == opts.max_iter {
                break;
            }
            iterations += 1;

            let mut restart = false;
            for c in 0..k {
                let resp: Vec<f64> = (0..n).map(|i| logp[(i, c)]).collect();
                let mass: f64 = resp.iter().sum();
                if mass < 1e-10 {
                    if reseeded[c] {
                        return Err(Error::Fit(format!("component {c} emptied out twice")));
                    }
                    reseeded[c] = true;
                    // restart the component at the worst-explained sample
                    let worst = row_ll
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, v)| if *v < row_ll[b] { i } else { b });
                    means[c] = samples.column(worst).into_owned();
                    covs[c] = global_cov.clone();
                    weights[c] = 1.0 / k as f64;
                    restart = true;
                    continue;
                }
                let w: Vec<f64> = resp.iter().map(|r| r / mass).collect();
                let (m, cov) = weighted_moments(samples, &w, opts.reg);
                means[c] = m;
                covs[c] = cov;
                weights[c] = mass / n as f64;
            }
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);
            if restart {
                // the likelihood sequence restarts after a re-seed
                history.clear();
            }
        }

        let component_mass = (0..k).map(|c| (0..n).map(|i| logp[(i, c)]).sum()).collect();
        let report = FitReport {
            iterations,
            log_likelihood: *history.last().expect("at least one E-step"),
            converged,
            loglik_history: history,
            component_mass,
            reseeded: reseeded.iter().filter(|r| **r).count(),
            kappa_capped: false,
        };
        Ok((model, report))
    }
}

/// Weighted mean and covariance (weights sum to one), loaded with
/// `reg * trace / d` on the diagonal.
fn weighted_moments(samples: &DMatrix<f64>, w: &[f64], reg: f64) -> (DVector<f64>, DMatrix<f64>) {
    let d = samples.nrows();
    let mut mean = DVector::zeros(d);
    for (col, wi) in samples.column_iter().zip(w) {
        mean.axpy(*wi, &col, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = DVector::zeros(d);
    for (col, wi) in samples.column_iter().zip(w) {
        if *wi == 0.0 {
            continue;
        }
        centered.copy_from(&col);
        centered -= &mean;
        cov.ger(*wi, &centered, &centered, 1.0);
    }
    let scale = cov.trace() / d as f64;
    let load = if scale > 0.0 { reg * scale } else { reg.max(f64::MIN_POSITIVE) };
    for i in 0..d {
        cov[(i, i)] += load;
    }
    (mean, cov)
}

fn total_loglik(model: &GaussianMixture, samples: &DMatrix<f64>) -> Result<f64> {
    samples.column_iter().map(|c| model.logpdf(c.as_slice())).sum()
}
