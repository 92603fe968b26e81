//! Localized moments: every particle sees the ensemble through its own
//! column of a column-stochastic weight matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{weighted_moments, Ensemble, Moments};
use crate::error::{Error, Result};
use crate::mixtures::{cluster_responsibilities, fit_mixture, Family, FitOptions};

/// `J x J` matrix with nonnegative entries and unit column sums. Column `j`
/// holds the weights particle `j` assigns to the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    /// Normalizes the columns of a nonnegative matrix.
    pub fn from_unnormalized(mut m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidArgument("weight matrix must be square".into()));
        }
        for (j, mut col) in m.column_iter_mut().enumerate() {
            if col.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::NonFinite(format!("weight column {j}")));
            }
            let s: f64 = col.sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateWeights);
            }
            col /= s;
        }
        Ok(Self(m))
    }

    /// Every entry `1/J`; localized moments then equal the global ones.
    pub fn uniform(j: usize) -> Self {
        Self(DMatrix::from_element(j, j, 1.0 / j as f64))
    }

    pub fn size(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.size();
        &self.0.as_slice()[j * n..(j + 1) * n]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `W_ij = exp(-|u_i - u_j|^2 / (2 alpha))`, column-normalized.
pub fn weight_matrix_fixed(ens: &Ensemble, alpha: f64) -> Result<WeightMatrix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let p = ens.particles();
    let j = p.ncols();
    let mut m = DMatrix::from_element(j, j, 1.0);
    for a in 0..j {
        for b in (a + 1)..j {
            let d2 = (p.column(a) - p.column(b)).norm_squared();
            let w = (-d2 / (2.0 * alpha)).exp();
            m[(a, b)] = w;
            m[(b, a)] = w;
        }
    }
    WeightMatrix::from_unnormalized(m)
}

/// Weights from per-cluster metrics: for particle `j` in cluster `k`,
/// `W_ij = exp(-|L_k^{-1}(u_i - u_j)|^2 / 2)` where `L_k L_k^T = C_k`.
pub fn weight_matrix_from_factors(
    ens: &Ensemble,
    assignment: &[usize],
    factors: &[DMatrix<f64>],
) -> Result<WeightMatrix> {
    let p = ens.particles();
    let (d, j) = p.shape();
    if assignment.len() != j {
        return Err(Error::DimensionMismatch {
            expected: j,
            actual: assignment.len(),
        });
    }
    if assignment.iter().any(|k| *k >= factors.len()) {
        return Err(Error::InvalidArgument("cluster index without a covariance".into()));
    }
    // whitened copies of the ensemble, one per cluster metric
    let whitened: Vec<DMatrix<f64>> = factors
        .iter()
        .map(|l| {
            if l.shape() != (d, d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: l.nrows(),
                });
            }
            l.solve_lower_triangular(p)
                .ok_or_else(|| Error::InvalidArgument("singular cluster factor".into()))
        })
        .collect::<Result<_>>()?;
    let mut m = DMatrix::zeros(j, j);
    for col in 0..j {
        let y = &whitened[assignment[col]];
        let yj = y.column(col);
        for i in 0..j {
            m[(i, col)] = (-0.5 * (y.column(i) - yj).norm_squared()).exp();
        }
    }
    WeightMatrix::from_unnormalized(m)
}

/// Lower Cholesky factors of the cluster covariances, each loaded with
/// `eps * trace / d` on the diagonal. Clusters with fewer than two members
/// or a degenerate covariance fall back to the identity.
pub fn cluster_cholesky(particles: &DMatrix<f64>, assignment: &[usize], k: usize, eps: f64) -> Vec<DMatrix<f64>> {
    let d = particles.nrows();
    (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == c).collect();
            if members.len() < 2 {
                return DMatrix::identity(d, d);
            }
            let n = members.len() as f64;
            let mut mean = DVector::zeros(d);
            for &i in &members {
                mean += particles.column(i);
            }
            mean /= n;
            let mut cov = DMatrix::zeros(d, d);
            for &i in &members {
                let z = particles.column(i) - &mean;
                cov.ger(1.0 / n, &z, &z, 1.0);
            }
            let scale = cov.trace() / d as f64;
            if !(scale > 0.0) {
                return DMatrix::identity(d, d);
            }
            for i in 0..d {
                cov[(i, i)] += eps * scale;
            }
            nalgebra::Cholesky::new(cov)
                .map(|c| c.unpack())
                .unwrap_or_else(|| DMatrix::identity(d, d))
        })
        .collect()
}

/// Clusters the ensemble with a `k`-component mixture and weights each
/// particle's column with the covariance of its own cluster.
pub fn weight_matrix_adaptive<R: Rng + ?Sized>(
    ens: &Ensemble,
    k: usize,
    family: Family,
    eps: f64,
    rng: &mut R,
) -> Result<WeightMatrix> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let p = ens.particles();
    let assignment = if k == 1 {
        vec![0; p.ncols()]
    } else {
        let (model, _) = fit_mixture(family, p, k, &FitOptions::default(), rng)?;
        cluster_responsibilities(&model, p)?
    };
    let factors = cluster_cholesky(p, &assignment, k, eps);
    weight_matrix_from_factors(ens, &assignment, &factors)
}

/// Moments of the ensemble under column `j` of `w`.
pub fn localized_moments(ens: &Ensemble, w: &WeightMatrix, j: usize) -> Moments {
    weighted_moments(ens.particles(), ens.gtilde(), w.column(j))
}
