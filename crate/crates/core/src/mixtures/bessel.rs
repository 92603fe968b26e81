//! Modified Bessel function of the first kind, evaluated in log space.
//!
//! `I_nu(x)` overflows near `x = 710`, while the von Mises-Fisher normalizer
//! in high dimension needs `x` up to `1e6` and more. Three regimes:
//! - `x <= 500`: the ascending power series, terms by recurrence.
//! - `x > 500`, `nu <= 20`: Hankel's large-argument expansion.
//! - `x > 500`, `nu > 20`: Debye's uniform expansion in `nu`.

use std::f64::consts::PI;

use libm::lgamma as ln_gamma;

const SERIES_LIMIT: f64 = 500.0;
const HANKEL_MAX_ORDER: f64 = 20.0;

/// `ln I_nu(x)` for `nu >= 0`, `x >= 0`. Returns `-inf` for `I = 0` and NaN
/// outside the domain.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    if !(nu >= 0.0) || !(x >= 0.0) || nu.is_infinite() {
        return f64::NAN;
    }
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    if x <= SERIES_LIMIT {
        log_series(nu, x)
    } else if nu <= HANKEL_MAX_ORDER {
        log_hankel(nu, x)
    } else {
        log_debye(nu, x)
    }
}

/// `I_nu(x) = (x/2)^nu / Gamma(nu+1) * (1 + sum_{k>=1} t_k)`; the tail is
/// summed separately so that `ln(1 + tail)` stays accurate for tiny `x`.
fn log_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut tail = 0.0;
    let mut k = 0.0;
    loop {
        let ratio = q / ((k + 1.0) * (k + 1.0 + nu));
        term *= ratio;
        tail += term;
        k += 1.0;
        if ratio < 1.0 && term <= 1e-17 * tail {
            break;
        }
        if k > 10_000.0 {
            break;
        }
    }
    nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + tail.ln_1p()
}

fn log_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut prev_abs = f64::INFINITY;
    for k in 1..60 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (kf * 8.0 * x);
        if next.abs() >= prev_abs {
            // asymptotic series started to diverge
            break;
        }
        term = next;
        sum += term;
        prev_abs = term.abs();
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

fn log_debye(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let sq = (1.0 + z * z).sqrt();
    let eta = sq + z.ln() - (1.0 + sq).ln();
    let p = 1.0 / sq;
    let p2 = p * p;
    let u1 = p * (3.0 - 5.0 * p2) / 24.0;
    let u2 = p2 * (81.0 - 462.0 * p2 + 385.0 * p2 * p2) / 1152.0;
    let u3 = p * p2
        * (30375.0 - 369_603.0 * p2 + 765_765.0 * p2 * p2 - 425_425.0 * p2 * p2 * p2)
        / 414_720.0;
    let p4 = p2 * p2;
    let u4 = p4
        * (4_465_125.0 - 94_121_676.0 * p2 + 349_922_430.0 * p4
            - 446_185_740.0 * p4 * p2
            + 185_910_725.0 * p4 * p4)
        / 39_813_120.0;
    let inv = 1.0 / nu;
    let sum = 1.0 + inv * (u1 + inv * (u2 + inv * (u3 + inv * u4)));
    nu * eta - 0.5 * (2.0 * PI * nu).ln() - 0.5 * sq.ln() + sum.ln()
}

/// `I_{nu+1}(x) / I_nu(x)`, the mean resultant length of a von Mises-Fisher
/// distribution with `nu = d/2 - 1`.
pub fn bessel_ratio(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    (log_bessel_i(nu + 1.0, x) - log_bessel_i(nu, x)).exp()
}
