//! Noise-free particle dynamics for the affine limit-state
//! `G(u) = u_1 - b` with `b < 0`.
//!
//! In the continuous-time limit each safe particle follows
//! `du_j/dt = -G_j C a + (G_j / J) sum_{k in F} G_k (u_k - mean)`, where `F`
//! is the set of particles that fail at `t = 0` and never move. Both terms
//! point along one common direction, so a right-hand side evaluation costs
//! `O(J d)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::enkf::{enkf_step_global, Ensemble, Noise, UpdateConfig};
use crate::error::{Error, Result};
use crate::lsf::{AffineLsf, LimitState};
use crate::stats::{normal_cdf, normal_pdf};

/// Particles closer than this to the surface are projected onto it.
pub const SNAP_TOL: f64 = 1e-12;
const MAX_HALVINGS: u32 = 40;

fn check_b(b: f64) -> Result<()> {
    if !(b < 0.0) || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("b must be negative, got {b}")));
    }
    Ok(())
}

/// First coordinate of the mean of the optimal importance density,
/// `-phi(b) / Phi(b)`.
pub fn u_opt1(b: f64) -> Result<f64> {
    check_b(b)?;
    Ok(-normal_pdf(b) / normal_cdf(b))
}

/// Mean of the optimal importance density in `R^d`.
pub fn u_opt(b: f64, d: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; d.max(1)];
    v[0] = u_opt1(b)?;
    Ok(v)
}

/// Mean-field mean and variance along `a` without failure particles:
/// `m_1 = b (1 - 1/sqrt(2t + 1))`, `C_11 = 1/(1 + 2t)`.
pub fn predicted_moments(b: f64, t: f64) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be >= 0, got {t}")));
    }
    Ok((b * (1.0 - 1.0 / (2.0 * t + 1.0).sqrt()), 1.0 / (1.0 + 2.0 * t)))
}

/// Relative distance of the mean-field mean to the most likely failure point.
pub fn relative_distance_to_mlfp(t: f64) -> f64 {
    1.0 / (2.0 * t + 1.0).sqrt()
}

/// Large-ensemble, long-time limit of the mean with failure particles:
/// `(1 - Phi(b)) u_mlfp + Phi(b) u_opt`.
pub fn limit_mean(b: f64, d: usize) -> Result<Vec<f64>> {
    let pf = normal_cdf(b);
    let mut v = vec![0.0; d.max(1)];
    v[0] = (1.0 - pf) * b + pf * u_opt1(b)?;
    Ok(v)
}

/// Lower bound on the limiting variance along `a` given the safe-particle
/// mean `m_s` and failure probability `pf`.
pub fn variance_lower_bound(b: f64, m_s: f64, pf: f64) -> Result<f64> {
    let uo = u_opt1(b)?;
    Ok((1.0 - pf) * m_s * m_s + pf * (1.0 + b * uo) - ((1.0 - pf) * m_s + pf * uo).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryScenario {
    pub b: f64,
    pub d: usize,
    pub j: usize,
    pub t_end: f64,
    pub dt: f64,
}

impl TheoryScenario {
    pub fn validate(&self) -> Result<()> {
        check_b(self.b)?;
        if self.d == 0 || self.j < 2 {
            return Err(Error::InvalidArgument("need d >= 1 and J >= 2".into()));
        }
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) {
            return Err(Error::InvalidArgument("need dt > 0 and t_end >= 0".into()));
        }
        Ok(())
    }

    pub fn lsf(&self) -> Result<LimitState> {
        AffineLsf::first_axis(self.d, self.b)?.into_limit_state()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Standard normal start with an empty failure set: every particle
    /// follows the safe-particle flow, which is the setting of the closed-form
    /// mean and covariance.
    NoFailure,
    /// Standard normal draws conditioned on `G > 0` by rejection.
    NoFailureRejection,
    /// Standard normal start; particles with `G < 0` form the frozen set.
    WithFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    /// Mean of the particles outside the frozen set.
    pub safe_mean1: f64,
    pub failure_fraction: f64,
}

impl TrajectoryPoint {
    pub fn m1(&self) -> f64 {
        self.mean[0]
    }

    pub fn c11(&self) -> f64 {
        self.cov_diag[0]
    }

    fn from_particles(t: f64, p: &DMatrix<f64>, frozen: &[bool], b: f64) -> Self {
        let (d, j) = p.shape();
        let n = j as f64;
        let mean = p.column_mean();
        let mut cov_diag = vec![0.0; d];
        for col in p.column_iter() {
            for i in 0..d {
                cov_diag[i] += (col[i] - mean[i]).powi(2) / n;
            }
        }
        let (mut s, mut ns) = (0.0, 0usize);
        for (k, col) in p.column_iter().enumerate() {
            if !frozen[k] {
                s += col[0];
                ns += 1;
            }
        }
        let failing = p.column_iter().filter(|c| c[0] - b <= 0.0).count();
        Self {
            t,
            mean: mean.as_slice().to_vec(),
            cov_diag,
            safe_mean1: if ns > 0 { s / ns as f64 } else { f64::NAN },
            failure_fraction: failing as f64 / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub points: Vec<TrajectoryPoint>,
    pub initial: DMatrix<f64>,
    pub particles: DMatrix<f64>,
    pub frozen: Vec<bool>,
    /// Accepted integration steps, including halved ones.
    pub steps: usize,
    pub min_safe_g: f64,
}

/// Initial ensemble for the given mode.
pub fn initial_ensemble<R: Rng + ?Sized>(
    scenario: &TheoryScenario,
    mode: InitMode,
    rng: &mut R,
) -> Result<(DMatrix<f64>, Vec<bool>)> {
    scenario.validate()?;
    let (d, j, b) = (scenario.d, scenario.j, scenario.b);
    let mut p = DMatrix::from_fn(d, j, |_, _| rng.sample::<f64, _>(StandardNormal));
    let frozen = match mode {
        InitMode::NoFailure => vec![false; j],
        InitMode::NoFailureRejection => {
            for mut col in p.column_iter_mut() {
                while col[0] - b <= 0.0 {
                    for x in col.iter_mut() {
                        *x = rng.sample(StandardNormal);
                    }
                }
            }
            vec![false; j]
        }
        InitMode::WithFailure => p.column_iter().map(|c| c[0] - b < 0.0).collect(),
    };
    Ok((p, frozen))
}

/// Common direction `v` with `du_j/dt = G_j v` for every moving particle.
fn flow_direction(p: &DMatrix<f64>, frozen: &[bool], b: f64, v: &mut DVector<f64>) {
    let (d, j) = p.shape();
    let n = j as f64;
    let mean = p.column_mean();
    v.fill(0.0);
    for (k, col) in p.column_iter().enumerate() {
        let dx1 = col[0] - mean[0];
        // -C a with a = e_1
        let mut coef = -dx1 / n;
        if frozen[k] {
            coef += (col[0] - b) / n;
        }
        for i in 0..d {
            v[i] += coef * (col[i] - mean[i]);
        }
    }
}

/// One classical fourth-order step of size `dt` for the moving particles.
fn rk4_step(p: &DMatrix<f64>, frozen: &[bool], b: f64, dt: f64) -> DMatrix<f64> {
    let d = p.nrows();
    let g = |q: &DMatrix<f64>, k: usize| q[(0, k)] - b;
    let mut v = DVector::zeros(d);
    let stage = |q: &DMatrix<f64>, v: &mut DVector<f64>| -> DMatrix<f64> {
        flow_direction(q, frozen, b, v);
        let mut k = DMatrix::zeros(q.nrows(), q.ncols());
        for (c, mut col) in k.column_iter_mut().enumerate() {
            if !frozen[c] {
                col.axpy(g(q, c), v, 0.0);
            }
        }
        k
    };
    let k1 = stage(p, &mut v);
    let p2 = p + &k1 * (0.5 * dt);
    let k2 = stage(&p2, &mut v);
    let p3 = p + &k2 * (0.5 * dt);
    let k3 = stage(&p3, &mut v);
    let p4 = p + &k3 * dt;
    let k4 = stage(&p4, &mut v);
    let mut out = p.clone();
    for c in 0..p.ncols() {
        if frozen[c] {
            continue;
        }
        for i in 0..d {
            out[(i, c)] += dt / 6.0 * (k1[(i, c)] + 2.0 * k2[(i, c)] + 2.0 * k3[(i, c)] + k4[(i, c)]);
        }
    }
    out
}

fn record_targets(record_times: &[f64], t_end: f64) -> Vec<f64> {
    let mut targets: Vec<f64> = record_times.iter().copied().filter(|t| *t > 0.0 && *t <= t_end).collect();
    targets.push(t_end);
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    targets
}

/// Sufficient statistics of the initial ensemble. A moving particle obeys
/// `du_j/dt = G_j v` with `dG_j/dt = G_j v_1`, so it stays on the line
/// `u_j(t) = x_j + g_j w(t)` with `x_j = u_j(0)`, `g_j = G(x_j)` and one
/// shared `w(t)`. The ensemble moments are then polynomials in `w`, and the
/// flow reduces to `dw/dt = (1 + w_1) v(w)`.
struct LineFlow {
    /// `(1/J) sum x_k`, `(1/J) sum x_k x_k1`, `(1/J) sum x_k^2` over all.
    mean: DVector<f64>,
    cross1: DVector<f64>,
    second: DVector<f64>,
    /// `(1/J) sum g_k x_k`, `(1/J) sum g_k`, `(1/J) sum g_k^2` over moving.
    q: DVector<f64>,
    s1: f64,
    s2: f64,
    /// `(1/J) sum g_k x_k` and `(1/J) sum g_k` over the frozen set.
    qf: DVector<f64>,
    sf: f64,
    n: usize,
    n_moving: usize,
    moving_mean1: f64,
    moving_g_sum: f64,
    frozen_failing: usize,
    moving_nonpos: usize,
    min_pos_g: f64,
    max_g: f64,
}

impl LineFlow {
    fn new(x: &DMatrix<f64>, frozen: &[bool], b: f64) -> Self {
        let (d, j) = x.shape();
        let inv = 1.0 / j as f64;
        let mut f = LineFlow {
            mean: DVector::zeros(d),
            cross1: DVector::zeros(d),
            second: DVector::zeros(d),
            q: DVector::zeros(d),
            s1: 0.0,
            s2: 0.0,
            qf: DVector::zeros(d),
            sf: 0.0,
            n: j,
            n_moving: 0,
            moving_mean1: 0.0,
            moving_g_sum: 0.0,
            frozen_failing: 0,
            moving_nonpos: 0,
            min_pos_g: f64::INFINITY,
            max_g: f64::NEG_INFINITY,
        };
        for (k, col) in x.column_iter().enumerate() {
            let g = col[0] - b;
            for i in 0..d {
                f.mean[i] += inv * col[i];
                f.cross1[i] += inv * col[i] * col[0];
                f.second[i] += inv * col[i] * col[i];
            }
            if frozen[k] {
                f.sf += inv * g;
                f.qf.axpy(inv * g, &col, 1.0);
                f.frozen_failing += usize::from(g <= 0.0);
            } else {
                f.s1 += inv * g;
                f.s2 += inv * g * g;
                f.q.axpy(inv * g, &col, 1.0);
                f.n_moving += 1;
                f.moving_mean1 += col[0];
                f.moving_g_sum += g;
                f.moving_nonpos += usize::from(g <= 0.0);
                if g >= 0.0 {
                    f.min_pos_g = f.min_pos_g.min(g);
                }
                f.max_g = f.max_g.max(g);
            }
        }
        if f.n_moving > 0 {
            f.moving_mean1 /= f.n_moving as f64;
        }
        f
    }

    fn ensemble_mean(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.mean + w * self.s1
    }

    fn rate(&self, w: &DVector<f64>) -> DVector<f64> {
        let m = self.ensemble_mean(w);
        // (1/J) sum u_k u_k1 - m m_1 = C a
        let second1 = &self.cross1 + &self.q * w[0] + w * self.q[0] + w * (w[0] * self.s2);
        let c_a = second1 - &m * m[0];
        let v = -c_a + &self.qf - &m * self.sf;
        v * (1.0 + w[0])
    }

    fn rk4(&self, w: &DVector<f64>, h: f64) -> DVector<f64> {
        let k1 = self.rate(w);
        let k2 = self.rate(&(w + &k1 * (0.5 * h)));
        let k3 = self.rate(&(w + &k2 * (0.5 * h)));
        let k4 = self.rate(&(w + &k3 * h));
        w + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    fn point(&self, t: f64, w: &DVector<f64>) -> TrajectoryPoint {
        let m = self.ensemble_mean(w);
        let d = m.len();
        let cov_diag = (0..d)
            .map(|i| self.second[i] + 2.0 * w[i] * self.q[i] + w[i] * w[i] * self.s2 - m[i] * m[i])
            .collect();
        let lambda = 1.0 + w[0];
        let moving_failing = if lambda > 0.0 {
            self.moving_nonpos
        } else if lambda == 0.0 {
            self.n_moving
        } else {
            self.n_moving - self.moving_nonpos
        };
        TrajectoryPoint {
            t,
            mean: m.as_slice().to_vec(),
            cov_diag,
            safe_mean1: if self.n_moving > 0 {
                self.moving_mean1 + self.moving_g_sum / self.n_moving as f64 * w[0]
            } else {
                f64::NAN
            },
            failure_fraction: (self.frozen_failing + moving_failing) as f64 / self.n as f64,
        }
    }
}

/// Integrates the flow from `initial` up to `t_end` with RK4 at step `dt`,
/// recording moments at every time in `record_times` (and at 0). A step that
/// carries a moving particle strictly across the surface is rejected and
/// halved. Cost per step is `O(d)` after an `O(J d)` setup.
pub fn integrate_flow_from(
    initial: DMatrix<f64>,
    frozen: Vec<bool>,
    b: f64,
    t_end: f64,
    dt: f64,
    record_times: &[f64],
) -> Result<FlowTrajectory> {
    check_b(b)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    if frozen.len() != initial.ncols() {
        return Err(Error::DimensionMismatch {
            expected: initial.ncols(),
            actual: frozen.len(),
        });
    }
    let flow = LineFlow::new(&initial, &frozen, b);
    let g_scale = flow.max_g.abs().max(flow.min_pos_g.abs()).max(f64::MIN_POSITIVE);
    let mut w = DVector::zeros(initial.nrows());
    let mut points = vec![flow.point(0.0, &w)];
    let mut t = 0.0;
    let mut steps = 0;
    let mut min_lambda = 1.0f64;
    for target in record_targets(record_times, t_end) {
        while target - t > 1e-12 * target.max(1.0) {
            let mut h = dt.min(target - t);
            let mut halvings = 0;
            let next = loop {
                let cand = flow.rk4(&w, h);
                if !cand.iter().all(|x| x.is_finite()) {
                    return Err(Error::Integration(format!("non-finite state at t = {t}")));
                }
                // G_j = g_j (1 + w_1): every moving particle crosses together
                if 1.0 + cand[0] >= -SNAP_TOL / g_scale {
                    break cand;
                }
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    return Err(Error::Integration(format!("step size underflow at t = {t}")));
                }
                h *= 0.5;
            };
            w = next;
            min_lambda = min_lambda.min(1.0 + w[0]);
            t += h;
            steps += 1;
        }
        t = target;
        points.push(flow.point(t, &w));
    }

    let lambda = 1.0 + w[0];
    let mut p = initial.clone();
    for (c, mut col) in p.column_iter_mut().enumerate() {
        if frozen[c] {
            continue;
        }
        let g = col[0] - b;
        col.axpy(g, &w, 1.0);
        if (g * lambda).abs() <= SNAP_TOL {
            col[0] = b;
        }
    }
    let min_safe_g = if flow.n_moving == flow.moving_nonpos && flow.min_pos_g.is_infinite() {
        f64::INFINITY
    } else if min_lambda >= 0.0 {
        min_lambda * flow.min_pos_g
    } else {
        min_lambda * flow.max_g
    };
    Ok(FlowTrajectory {
        points,
        initial,
        particles: p,
        frozen,
        steps,
        min_safe_g,
    })
}

/// Reference integrator: RK4 on every particle, `O(J d)` per stage. Same
/// contract as [`integrate_flow_from`], used to cross-check it.
pub fn integrate_flow_direct(
    initial: DMatrix<f64>,
    frozen: Vec<bool>,
    b: f64,
    t_end: f64,
    dt: f64,
    record_times: &[f64],
) -> Result<FlowTrajectory> {
    check_b(b)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let mut p = initial.clone();
    let mut points = vec![TrajectoryPoint::from_particles(0.0, &p, &frozen, b)];
    let mut t = 0.0;
    let mut steps = 0;
    let mut min_safe_g = f64::INFINITY;
    for target in record_targets(record_times, t_end) {
        while target - t > 1e-12 * target.max(1.0) {
            let mut h = dt.min(target - t);
            let mut halvings = 0;
            let next = loop {
                let cand = rk4_step(&p, &frozen, b, h);
                let crossed = (0..p.ncols()).any(|c| {
                    if frozen[c] {
                        return false;
                    }
                    let (g0, g1) = (p[(0, c)] - b, cand[(0, c)] - b);
                    (g0 >= 0.0 && g1 < -SNAP_TOL) || (g0 < 0.0 && g1 > SNAP_TOL)
                });
                if !crossed {
                    break cand;
                }
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    return Err(Error::Integration(format!("step size underflow at t = {t}")));
                }
                h *= 0.5;
            };
            p = next;
            for c in 0..p.ncols() {
                if frozen[c] {
                    continue;
                }
                let g = p[(0, c)] - b;
                if g.abs() <= SNAP_TOL {
                    p[(0, c)] = b;
                }
                if p[(0, c)] - b >= 0.0 || !frozen.iter().any(|f| *f) {
                    min_safe_g = min_safe_g.min(p[(0, c)] - b);
                }
            }
            t += h;
            steps += 1;
        }
        t = target;
        points.push(TrajectoryPoint::from_particles(t, &p, &frozen, b));
    }
    Ok(FlowTrajectory {
        points,
        initial,
        particles: p,
        frozen,
        steps,
        min_safe_g,
    })
}

/// Draws the initial ensemble for `mode` and integrates the flow.
pub fn integrate_particle_flow<R: Rng + ?Sized>(
    scenario: &TheoryScenario,
    mode: InitMode,
    record_times: &[f64],
    rng: &mut R,
) -> Result<FlowTrajectory> {
    let (p, frozen) = initial_ensemble(scenario, mode, rng)?;
    integrate_flow_from(p, frozen, scenario.b, scenario.t_end, scenario.dt, record_times)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub h: f64,
    /// Largest `|mean_discrete(t_n) - mean_flow(t_n)|` over `t_n = n h`.
    pub max_mean_deviation: f64,
    pub deviation_at_zero: f64,
}

/// Compares the noise-free discrete EnKF at fixed step `h` with the flow
/// (integrated at `flow_dt`) from the same initial ensemble.
pub fn discrete_vs_continuous(
    initial: &DMatrix<f64>,
    b: f64,
    t_end: f64,
    h: f64,
    flow_dt: f64,
) -> Result<DeviationReport> {
    check_b(b)?;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("h must be positive".into()));
    }
    let d = initial.nrows();
    let lsf = AffineLsf::first_axis(d, b)?.into_limit_state()?;
    let n_steps = (t_end / h).round() as usize;
    let times: Vec<f64> = (1..=n_steps).map(|n| n as f64 * h).collect();
    let frozen: Vec<bool> = initial.column_iter().map(|c| c[0] - b < 0.0).collect();
    let flow = integrate_flow_from(initial.clone(), frozen, b, n_steps as f64 * h, flow_dt, &times)?;

    let cfg = UpdateConfig {
        noise: Noise::None,
        ..UpdateConfig::default()
    };
    let mut rng = crate::rng_from_seed(0);
    let mut ens = Ensemble::from_particles(&lsf, initial.clone())?;
    let mean_dev = |ens: &Ensemble, pt: &TrajectoryPoint| {
        let m = ens.particles().column_mean();
        m.iter().zip(&pt.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let deviation_at_zero = mean_dev(&ens, &flow.points[0]);
    let mut max_dev = deviation_at_zero;
    for n in 1..=n_steps {
        ens = enkf_step_global(&ens, &lsf, h, &cfg, &mut rng)?;
        max_dev = max_dev.max(mean_dev(&ens, &flow.points[n]));
    }
    Ok(DeviationReport {
        h,
        max_mean_deviation: max_dev,
        deviation_at_zero,
    })
}

/// Trajectory CSV with columns `t, m_1..m_d, C_11, failure_fraction`.
pub fn write_trajectory_csv<W: Write>(points: &[TrajectoryPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = points.first().map_or(0, |p| p.mean.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("m_{i}")));
    header.push("C_11".into());
    header.push("failure_fraction".into());
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![p.t.to_string()];
        row.extend(p.mean.iter().map(|x| x.to_string()));
        row.push(p.c11().to_string());
        row.push(p.failure_fraction.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
