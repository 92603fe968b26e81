//! Von Mises-Fisher-Nakagami mixture in polar coordinates `u = r a`.
//!
//! Each component is a Nakagami density on the radius times a von
//! Mises-Fisher density on the direction. `logpdf` returns the density on
//! `R^d`, which carries the Jacobian `r^{-(d-1)}` of the polar map.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use libm::lgamma as ln_gamma;
use rand_distr::{Beta, Gamma, StandardNormal};
use statrs::function::gamma::digamma;

use super::bessel::{bessel_ratio, log_bessel_i};
use super::{check_weights, draw_component, kmeans_pp, normalize_responsibilities, FitOptions, FitReport};
use crate::error::{Error, Result};
use crate::stats::log_sum_exp;

pub const KAPPA_MAX: f64 = 1e7;
pub const SHAPE_MIN: f64 = 0.5;
pub const SHAPE_MAX: f64 = 1e6;
const MAX_PROPOSALS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct VmfnmMixture {
    weights: Vec<f64>,
    directions: Vec<DVector<f64>>,
    kappas: Vec<f64>,
    shapes: Vec<f64>,
    spreads: Vec<f64>,
    /// `ln pi_k + ln C_d(kappa_k) + ln 2 + s ln s - ln Gamma(s) - s ln gamma`
    log_const: Vec<f64>,
}

/// `ln C_d(kappa)`, the von Mises-Fisher normalizer on the unit sphere in
/// `R^d`. At `kappa = 0` it is minus the log of the sphere's surface area.
pub fn log_vmf_normalizer(d: usize, kappa: f64) -> f64 {
    let half = d as f64 / 2.0;
    if kappa == 0.0 {
        return ln_gamma(half) - std::f64::consts::LN_2 - half * PI.ln();
    }
    let nu = half - 1.0;
    nu * kappa.ln() - half * (2.0 * PI).ln() - log_bessel_i(nu, kappa)
}

/// Log-density of the Nakagami distribution with shape `s` and spread `gamma`.
pub fn nakagami_logpdf(r: f64, s: f64, gamma: f64) -> f64 {
    std::f64::consts::LN_2 + s * s.ln() - ln_gamma(s) - s * gamma.ln() + (2.0 * s - 1.0) * r.ln()
        - s * r * r / gamma
}

impl VmfnmMixture {
    pub fn new(
        weights: Vec<f64>,
        directions: Vec<DVector<f64>>,
        kappas: Vec<f64>,
        shapes: Vec<f64>,
        spreads: Vec<f64>,
    ) -> Result<Self> {
        check_weights(&weights)?;
        let k = weights.len();
        if directions.len() != k || kappas.len() != k || shapes.len() != k || spreads.len() != k {
            return Err(Error::Fit("one parameter set per component".into()));
        }
        let d = directions[0].len();
        if d < 2 {
            return Err(Error::Fit("vMFNM needs dimension >= 2".into()));
        }
        let mut log_const = Vec::with_capacity(k);
        for c in 0..k {
            let nu = &directions[c];
            if nu.len() != d || (nu.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::Fit(format!("direction {c} must be a unit vector in R^{d}")));
            }
            if !(kappas[c] >= 0.0 && kappas[c].is_finite()) {
                return Err(Error::Fit(format!("concentration {c} must be >= 0")));
            }
            if !(shapes[c] >= SHAPE_MIN && shapes[c].is_finite()) {
                return Err(Error::Fit(format!("shape {c} must be >= {SHAPE_MIN}")));
            }
            if !(spreads[c] > 0.0 && spreads[c].is_finite()) {
                return Err(Error::Fit(format!("spread {c} must be positive")));
            }
            let s = shapes[c];
            log_const.push(
                weights[c].ln() + log_vmf_normalizer(d, kappas[c]) + std::f64::consts::LN_2 + s * s.ln()
                    - ln_gamma(s)
                    - s * spreads[c].ln(),
            );
        }
        Ok(Self {
            weights,
            directions,
            kappas,
            shapes,
            spreads,
            log_const,
        })
    }

    pub fn dim(&self) -> usize {
        self.directions[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn directions(&self) -> &[DVector<f64>] {
        &self.directions
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappas
    }

    pub fn shapes(&self) -> &[f64] {
        &self.shapes
    }

    pub fn spreads(&self) -> &[f64] {
        &self.spreads
    }

    /// Joint log-density in polar coordinates `(r, a)`, without the Jacobian.
    fn polar_joint(&self, r: f64, a: &[f64], out: &mut [f64]) {
        let ln_r = r.ln();
        for (k, o) in out.iter_mut().enumerate() {
            let s = self.shapes[k];
            let dot: f64 = self.directions[k].iter().zip(a).map(|(x, y)| x * y).sum();
            *o = self.log_const[k] + (2.0 * s - 1.0) * ln_r - s * r * r / self.spreads[k] + self.kappas[k] * dot;
        }
    }

    fn polar(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.dim();
        if u.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: u.len(),
            });
        }
        let r = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidArgument("vMFNM density is undefined at the origin".into()));
        }
        Ok((r, u.iter().map(|x| x / r).collect()))
    }

    pub fn joint_logpdfs(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        let (r, a) = self.polar(u)?;
        self.polar_joint(r, &a, out);
        Ok(())
    }

    pub fn logpdf(&self, u: &[f64]) -> Result<f64> {
        let (r, a) = self.polar(u)?;
        let mut buf = vec![0.0; self.weights.len()];
        self.polar_joint(r, &a, &mut buf);
        Ok(log_sum_exp(&buf) - (self.dim() as f64 - 1.0) * r.ln())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let k = draw_component(&self.weights, rng);
        let s = self.shapes[k];
        let r2: f64 = rng.sample(
            Gamma::new(s, self.spreads[k] / s).map_err(|e| Error::Sampler(e.to_string()))?,
        );
        let a = sample_vmf(&self.directions[k], self.kappas[k], rng)?;
        let r = r2.sqrt();
        Ok(a.into_iter().map(|x| r * x).collect())
    }

    /// EM fit on the polar decomposition of the samples.
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
        if d < 2 {
            return Err(Error::Fit("vMFNM needs dimension >= 2".into()));
        }
        if n < 2 * k {
            return Err(Error::Fit(format!("{n} samples are too few for {k} components")));
        }
        let radii: Vec<f64> = samples.column_iter().map(|c| c.norm()).collect();
        if radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Fit("samples must be finite and nonzero".into()));
        }
        let mut dirs = samples.clone();
        for (mut c, r) in dirs.column_iter_mut().zip(&radii) {
            c /= *r;
        }
        let r2: Vec<f64> = radii.iter().map(|r| r * r).collect();

        // initial responsibilities: hard assignment to k-means++ seed directions
        let mut resp = DMatrix::zeros(n, k);
        if k == 1 {
            resp.fill(1.0);
        } else {
            let seeds = kmeans_pp(&dirs, k, rng);
            for (i, col) in dirs.column_iter().enumerate() {
                let mut best = 0;
                let mut best_dot = f64::NEG_INFINITY;
                for (c, &s) in seeds.iter().enumerate() {
                    let dot = col.dot(&dirs.column(s));
                    if dot > best_dot {
                        best_dot = dot;
                        best = c;
                    }
                }
                resp[(i, best)] = 1.0;
            }
        }

        let mut history: Vec<f64> = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut reseeded = vec![false; k];
        let mut kappa_capped;
        let mut row_ll = vec![0.0; n];
        let mut buf = vec![0.0; k];
        let jacobian: f64 = radii.iter().map(|r| (d as f64 - 1.0) * r.ln()).sum();
        let mut model;

        loop {
            // M-step
            let mut params = MStep::default();
            kappa_capped = false;
            let mut restart = false;
            for c in 0..k {
                let mass: f64 = (0..n).map(|i| resp[(i, c)]).sum();
                if mass < 1e-10 {
                    if reseeded[c] {
                        return Err(Error::Fit(format!("component {c} emptied out twice")));
                    }
                    reseeded[c] = true;
                    restart = true;
                    let worst = if row_ll.iter().all(|v| *v == 0.0) {
                        rng.random_range(0..n)
                    } else {
                        row_ll
                            .iter()
                            .enumerate()
                            .fold(0, |b, (i, v)| if *v < row_ll[b] { i } else { b })
                    };
                    params.push(
                        1.0 / k as f64,
                        dirs.column(worst).into_owned(),
                        0.0,
                        d as f64 / 2.0,
                        r2.iter().sum::<f64>() / n as f64,
                    );
                    continue;
                }
                let mut sum_dir = DVector::zeros(d);
                for (i, col) in dirs.column_iter().enumerate() {
                    sum_dir.axpy(resp[(i, c)], &col, 1.0);
                }
                let len = sum_dir.norm();
                let rbar = len / mass;
                let nu = if len > 0.0 {
                    sum_dir / len
                } else {
                    let mut e = DVector::zeros(d);
                    e[0] = 1.0;
                    e
                };
                let kappa = if rbar >= 1.0 - 1e-12 {
                    kappa_capped = true;
                    KAPPA_MAX
                } else {
                    let k = kappa_mle(d, rbar);
                    kappa_capped |= k >= KAPPA_MAX;
                    k
                };
                let gamma = (0..n).map(|i| resp[(i, c)] * r2[i]).sum::<f64>() / mass;
                let mean_log = (0..n).map(|i| resp[(i, c)] * r2[i].ln()).sum::<f64>() / mass;
                let shape = shape_mle(gamma.ln() - mean_log);
                params.push(mass / n as f64, nu, kappa, shape, gamma);
            }
            let total: f64 = params.weights.iter().sum();
            params.weights.iter_mut().for_each(|w| *w /= total);
            model = Self::new(params.weights, params.directions, params.kappas, params.shapes, params.spreads)?;
            if restart {
                history.clear();
            }

            // E-step
            let mut logp = DMatrix::zeros(n, k);
            for (i, col) in dirs.column_iter().enumerate() {
                model.polar_joint(radii[i], col.as_slice(), &mut buf);
                for c in 0..k {
                    logp[(i, c)] = buf[c];
                }
            }
            let ll = normalize_responsibilities(&mut logp, &mut row_ll) - jacobian;
            if !ll.is_finite() {
                return Err(Error::Fit("log-likelihood is not finite".into()));
            }
            resp = logp;
            let done = match history.last() {
                Some(prev) => (ll - prev).abs() <= opts.tol * prev.abs(),
                None => k == 1,
            };
            history.push(ll);
            if done {
                converged = true;
                break;
            }
            if iterations == opts.max_iter {
                break;
            }
            iterations += 1;
        }

        let component_mass = (0..k).map(|c| (0..n).map(|i| resp[(i, c)]).sum()).collect();
        let report = FitReport {
            iterations,
            log_likelihood: *history.last().expect("at least one E-step"),
            converged,
            loglik_history: history,
            component_mass,
            reseeded: reseeded.iter().filter(|r| **r).count(),
            kappa_capped,
        };
        Ok((model, report))
    }
}

/// Concentration solving `A_d(kappa) = rbar` with
/// `A_d = I_{d/2}/I_{d/2-1}`, by safeguarded Newton started from Banerjee's
/// approximation `rbar (d - rbar^2) / (1 - rbar^2)`.
pub fn kappa_mle(d: usize, rbar: f64) -> f64 {
    if !(rbar > 0.0) {
        return 0.0;
    }
    let df = d as f64;
    let nu = 0.5 * df - 1.0;
    if bessel_ratio(nu, KAPPA_MAX) <= rbar {
        return KAPPA_MAX;
    }
    let (mut lo, mut hi) = (0.0, KAPPA_MAX);
    let mut kappa = (rbar * (df - rbar * rbar) / (1.0 - rbar * rbar)).clamp(1e-300, KAPPA_MAX);
    for _ in 0..200 {
        let a = bessel_ratio(nu, kappa);
        if a < rbar {
            lo = kappa;
        } else {
            hi = kappa;
        }
        let slope = 1.0 - a * a - (df - 1.0) / kappa * a;
        let mut next = kappa - (a - rbar) / slope;
        if !(slope > 0.0) || !(next > lo && next < hi) {
            next = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        }
        if (next - kappa).abs() <= 1e-13 * kappa {
            return next;
        }
        kappa = next;
    }
    kappa
}

/// Nakagami shape solving `ln s - psi(s) = c`, where
/// `c = ln(mean r^2) - mean(ln r^2) >= 0`, clamped to the admissible range.
pub fn shape_mle(c: f64) -> f64 {
    if !(c > 0.0) {
        return SHAPE_MAX;
    }
    let f = |s: f64| s.ln() - digamma(s) - c;
    // ln s - psi(s) decreases from +inf to 0; bisection in ln s
    let (mut lo, mut hi) = (SHAPE_MIN.ln(), SHAPE_MAX.ln());
    if f(SHAPE_MIN) <= 0.0 {
        return SHAPE_MIN;
    }
    if f(SHAPE_MAX) >= 0.0 {
        return SHAPE_MAX;
    }
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if f(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

#[derive(Default)]
struct MStep {
    weights: Vec<f64>,
    directions: Vec<DVector<f64>>,
    kappas: Vec<f64>,
    shapes: Vec<f64>,
    spreads: Vec<f64>,
}

impl MStep {
    fn push(&mut self, w: f64, nu: DVector<f64>, kappa: f64, shape: f64, spread: f64) {
        self.weights.push(w);
        self.directions.push(nu);
        self.kappas.push(kappa);
        self.shapes.push(shape);
        self.spreads.push(spread);
    }
}

/// Draws a direction from the von Mises-Fisher distribution with mean `mu`
/// by Wood's rejection sampler for the cosine `w = mu . a`, then rotates the
/// north pole onto `mu` with a Householder reflection.
pub fn sample_vmf<R: Rng + ?Sized>(mu: &DVector<f64>, kappa: f64, rng: &mut R) -> Result<Vec<f64>> {
    let d = mu.len();
    if kappa == 0.0 {
        loop {
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                return Ok(z.into_iter().map(|x| x / norm).collect());
            }
        }
    }
    let dm1 = d as f64 - 1.0;
    // b = (-2 kappa + sqrt(4 kappa^2 + (d-1)^2)) / (d-1), written without cancellation
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    // x0 = (1-b)/(1+b); c = kappa x0 + (d-1) ln(1 - x0^2), with 1 - x0^2 = 4b / (1+b)^2
    let log_one_minus_x0_sq = (4.0 * b).ln() - 2.0 * b.ln_1p();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).map_err(|e| Error::Sampler(e.to_string()))?;
    let mut accepted = None;
    for _ in 0..MAX_PROPOSALS {
        let z: f64 = rng.sample(beta);
        let denom = 1.0 - (1.0 - b) * z;
        let w = (1.0 - (1.0 + b) * z) / denom;
        // kappa (w - x0) + (d-1) ln(1 - x0 w) - (d-1) ln(1 - x0^2), all terms
        // expanded so that nothing cancels when b is tiny
        let w_minus_x0 = 2.0 * b * (1.0 - 2.0 * z) / ((1.0 + b) * denom);
        let log_one_minus_x0w = (2.0 * b).ln() - b.ln_1p() - denom.ln();
        let t = kappa * w_minus_x0 + dm1 * (log_one_minus_x0w - log_one_minus_x0_sq);
        let u: f64 = rng.random();
        if t >= u.ln() {
            let one_minus_w = 2.0 * b * z / denom;
            accepted = Some((w, one_minus_w));
            break;
        }
    }
    let (w, one_minus_w) = accepted.ok_or_else(|| Error::Sampler("vMF rejection sampler did not accept".into()))?;
    // tangent direction uniform on the sphere orthogonal to e1
    let mut v: Vec<f64> = (0..d - 1).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tangent_scale = (one_minus_w * (2.0 - one_minus_w)).max(0.0).sqrt();
    for x in v.iter_mut() {
        *x *= tangent_scale / vn;
    }
    let mut a = Vec::with_capacity(d);
    a.push(w);
    a.extend(v);
    // Householder reflection mapping e1 to mu
    let mut h: Vec<f64> = mu.iter().map(|x| -x).collect();
    h[0] += 1.0;
    let hn2: f64 = h.iter().map(|x| x * x).sum();
    if hn2 > 1e-30 {
        let proj: f64 = h.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() * 2.0 / hn2;
        for (ai, hi) in a.iter_mut().zip(&h) {
            *ai -= proj * hi;
        }
    }
    Ok(a)
}
