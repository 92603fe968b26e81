//! One-dimensional diffusion with a log-normal coefficient.
//!
//! `-(a y')' = 1` on `(0, 1)` with `y(0) = 0` and zero flux at `x = 1`.
//! `log a` is a Gaussian field with exponential covariance, represented by
//! its truncated Karhunen-Loeve expansion. The system fails when the
//! piecewise-linear finite element solution exceeds a threshold at `x = 1`.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{LimitState, LimitStateModel};
use crate::enkf::Localization;
use crate::error::{Error, Result};

/// Eigenpairs of the kernel `exp(-|x - y| / corr_length)` on `(0, 1)`.
#[derive(Debug, Clone)]
pub struct KlEigenpairs {
    pub corr_length: f64,
    /// Eigenvalues, strictly decreasing.
    pub values: Vec<f64>,
    /// Frequencies `w_m`; the eigenfunction is `cos` or `sin` of `w_m (x - 1/2)`.
    pub frequencies: Vec<f64>,
    /// `true` for the even (`cos`) family.
    pub even: Vec<bool>,
    norms: Vec<f64>,
}

impl KlEigenpairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// L2-normalized eigenfunction `m` (zero-based) at `x`.
    pub fn eigenfunction(&self, m: usize, x: f64) -> f64 {
        let arg = self.frequencies[m] * (x - 0.5);
        let raw = if self.even[m] { arg.cos() } else { arg.sin() };
        raw / self.norms[m]
    }
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::RootBracket(format!("no sign change on ({lo}, {hi})")));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Analytic eigenpairs of the exponential kernel with `c = 1 / corr_length`.
///
/// With the domain centred at `1/2`, the m-th frequency lies in
/// `((m-1) pi, m pi)`; odd `m` solve `c cos(w/2) = w sin(w/2)` (even
/// eigenfunctions), even `m` solve `w cos(w/2) + c sin(w/2) = 0` (odd ones).
/// Each eigenvalue is `2c / (w^2 + c^2)`.
pub fn kl_eigenpairs(corr_length: f64, n_terms: usize) -> Result<KlEigenpairs> {
    if !(corr_length > 0.0) {
        return Err(Error::InvalidArgument("correlation length must be positive".into()));
    }
    if n_terms == 0 {
        return Err(Error::InvalidArgument("need at least one KL term".into()));
    }
    let c = 1.0 / corr_length;
    let mut values = Vec::with_capacity(n_terms);
    let mut frequencies = Vec::with_capacity(n_terms);
    let mut even = Vec::with_capacity(n_terms);
    let mut norms = Vec::with_capacity(n_terms);
    for m in 1..=n_terms {
        // keep clear of the bracket ends where both sides can round to zero
        let lo = (m - 1) as f64 * PI + 1e-14;
        let hi = m as f64 * PI - 1e-14;
        let is_even = m % 2 == 1;
        let w = if is_even {
            bisect(|w| c * (0.5 * w).cos() - w * (0.5 * w).sin(), lo, hi, 1e-12)?
        } else {
            bisect(|w| w * (0.5 * w).cos() + c * (0.5 * w).sin(), lo, hi, 1e-12)?
        };
        let half_sin = w.sin() / (2.0 * w);
        let norm_sq = if is_even { 0.5 + half_sin } else { 0.5 - half_sin };
        values.push(2.0 * c / (w * w + c * c));
        frequencies.push(w);
        even.push(is_even);
        norms.push(norm_sq.sqrt());
    }
    Ok(KlEigenpairs {
        corr_length,
        values,
        frequencies,
        even,
        norms,
    })
}

#[derive(Debug, Clone)]
pub struct DiffusionProblem {
    pub kl_terms: usize,
    pub mesh_elements: usize,
    pub corr_length: f64,
    pub field_mean: f64,
    pub field_std: f64,
    pub threshold: f64,
    pub mu_z: f64,
    pub sigma_z: f64,
    pub eigen: KlEigenpairs,
    /// Eigenfunctions at the `mesh_elements + 1` nodes, `nodal[(m, i)]`.
    nodal: nalgebra::DMatrix<f64>,
    /// `sigma_z sqrt(nu_m) theta_m(x_e)` at element midpoints; column `e`
    /// holds all terms for element `e`.
    midpoint_basis: nalgebra::DMatrix<f64>,
}

impl DiffusionProblem {
    pub fn new(
        kl_terms: usize,
        mesh_elements: usize,
        corr_length: f64,
        field_mean: f64,
        field_std: f64,
        threshold: f64,
    ) -> Result<Self> {
        if mesh_elements < 2 {
            return Err(Error::InvalidArgument("mesh needs at least two elements".into()));
        }
        if !(field_mean > 0.0 && field_std > 0.0) {
            return Err(Error::InvalidArgument("field moments must be positive".into()));
        }
        let sigma_z_sq = ((field_std * field_std + field_mean * field_mean)
            / (field_mean * field_mean))
            .ln();
        let mu_z = field_mean.ln() - 0.5 * sigma_z_sq;
        let sigma_z = sigma_z_sq.sqrt();
        let eigen = kl_eigenpairs(corr_length, kl_terms)?;
        let h = 1.0 / mesh_elements as f64;
        let nodal = nalgebra::DMatrix::from_fn(kl_terms, mesh_elements + 1, |m, i| {
            eigen.eigenfunction(m, i as f64 * h)
        });
        let midpoint_basis = nalgebra::DMatrix::from_fn(kl_terms, mesh_elements, |m, e| {
            sigma_z * eigen.values[m].sqrt() * eigen.eigenfunction(m, (e as f64 + 0.5) * h)
        });
        Ok(Self {
            kl_terms,
            mesh_elements,
            corr_length,
            field_mean,
            field_std,
            threshold,
            mu_z,
            sigma_z,
            eigen,
            nodal,
            midpoint_basis,
        })
    }

    /// 150 KL terms, mesh size 1/512, correlation length 0.01, `E[a] = 1`,
    /// `Std[a] = 0.1`, threshold 0.535.
    pub fn benchmark() -> Result<Self> {
        Self::new(150, 512, 0.01, 1.0, 0.1, 0.535)
    }

    pub fn mesh_size(&self) -> f64 {
        1.0 / self.mesh_elements as f64
    }

    /// Fraction of the point variance of `log a` kept by the truncation.
    pub fn captured_variance(&self) -> f64 {
        self.eigen.values.iter().sum()
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.mesh_size()
    }

    /// Normalized eigenfunction `m` at node `i`.
    pub fn nodal_eigenfunction(&self, m: usize, i: usize) -> f64 {
        self.nodal[(m, i)]
    }

    fn check_dim(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.kl_terms {
            return Err(Error::DimensionMismatch {
                expected: self.kl_terms,
                actual: u.len(),
            });
        }
        Ok(())
    }

    /// `Z_d` at the mesh nodes.
    pub fn log_field_nodes(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        Ok((0..=self.mesh_elements)
            .map(|i| {
                let s: f64 = (0..self.kl_terms)
                    .map(|m| self.eigen.values[m].sqrt() * self.nodal[(m, i)] * u[m])
                    .sum();
                self.mu_z + self.sigma_z * s
            })
            .collect())
    }

    /// Diffusion coefficient `exp(Z_d)` at element midpoints.
    pub fn coefficient_midpoints(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        let mut coeff = Vec::with_capacity(self.mesh_elements);
        for e in 0..self.mesh_elements {
            let col = self.midpoint_basis.column(e);
            let z = self.mu_z + col.iter().zip(u).map(|(b, x)| b * x).sum::<f64>();
            let a = z.exp();
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::NonFinite(format!("diffusion coefficient in element {e}")));
            }
            coeff.push(a);
        }
        Ok(coeff)
    }

    /// Finite element value `y_h(1)` for the KL coordinates `u`.
    pub fn solve(&self, u: &[f64]) -> Result<f64> {
        let coeff = self.coefficient_midpoints(u)?;
        solve_with_coefficients(&coeff)
    }

    /// `G(u) = threshold - y_h(1)`.
    pub fn limit_state(&self, u: &[f64]) -> Result<f64> {
        Ok(self.threshold - self.solve(u)?)
    }

    pub fn into_limit_state(self) -> Result<LimitState> {
        LimitState::new(
            "diffusion1d",
            Arc::new(self),
            Some(1.682e-4),
            1,
            Localization::Global,
        )
    }
}

impl LimitStateModel for DiffusionProblem {
    fn dim(&self) -> usize {
        self.kl_terms
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        self.limit_state(u)
    }
}

/// Linear finite elements for `-(a y')' = 1`, `y(0) = 0`, `a y'(1) = 0` with
/// one coefficient per element on a uniform mesh. Returns the value at `x = 1`.
pub fn solve_with_coefficients(coeff: &[f64]) -> Result<f64> {
    let n = coeff.len();
    if n < 1 {
        return Err(Error::InvalidArgument("empty mesh".into()));
    }
    if coeff.iter().any(|a| !a.is_finite() || *a <= 0.0) {
        return Err(Error::NonFinite("diffusion coefficient".into()));
    }
    let h = 1.0 / n as f64;
    // unknowns y_1..y_n; row i couples nodes i-1, i, i+1
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![h; n];
    for i in 0..n {
        let left = coeff[i] / h;
        let right = if i + 1 < n { coeff[i + 1] / h } else { 0.0 };
        diag[i] = left + right;
        upper[i] = -right;
    }
    rhs[n - 1] = 0.5 * h;
    // forward elimination of the Thomas algorithm; y_h(1) is the last
    // unknown, so no back substitution is needed
    for i in 1..n {
        let w = upper[i - 1] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let y_end = rhs[n - 1] / diag[n - 1];
    if !y_end.is_finite() {
        return Err(Error::NonFinite("finite element solution".into()));
    }
    Ok(y_end)
}
