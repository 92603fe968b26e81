//! Batch experiments: seeded repeated trials, percentile outlier filtering,
//! relRMSE, and file output (per-trial CSV, summary JSON, model JSON).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enkf::{Localization, UpdateConfig};
use crate::error::{Error, Result};
use crate::estimator::{estimate_failure_probability, PipelineConfig, RunResult};
use crate::lsf::{problem, LimitState};
use crate::mixtures::{Family, FitOptions};
use crate::rng_from_seed;
use crate::stats::{mean, quantile_sorted};
use crate::tempering::{indicator_curves, TemperConfig};

pub const SUMMARY_SCHEMA: u32 = 1;
pub const TRIAL_COLUMNS: [&str; 6] = ["seed", "pf", "levels", "evals", "failure_fraction", "flags"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    pub j: usize,
    pub delta_target: f64,
    pub family: Family,
    /// Mixture components for the importance density.
    pub k: usize,
    pub localization: Localization,
    pub trials: usize,
    pub base_seed: u64,
    /// Directory for `trials.csv`, `summary.json` and `model.json`.
    pub out_dir: Option<PathBuf>,
    pub reference_pf: Option<f64>,
    /// Importance samples per trial; defaults to `j`.
    pub n_is: Option<usize>,
    /// Runs trials one after another instead of on the thread pool.
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "convex".into(),
            j: 1000,
            delta_target: 1.0,
            family: Family::Gm,
            k: 1,
            localization: Localization::Global,
            trials: 1,
            base_seed: 0,
            out_dir: None,
            reference_pf: None,
            n_is: None,
            deterministic: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// The limit-state with the reference override applied.
    pub fn limit_state(&self) -> Result<LimitState> {
        let lsf = problem(&self.problem)?;
        match self.reference_pf {
            Some(p) => lsf.with_reference_pf(Some(p)),
            None => Ok(lsf),
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            j: self.j,
            update: UpdateConfig::with_localization(self.localization),
            temper: TemperConfig::new(self.delta_target)?,
            family: self.family,
            k: self.k,
            n_is: self.n_is,
            fit: FitOptions::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        self.limit_state()?;
        self.pipeline()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub n_trials: usize,
    pub n_kept: usize,
    pub mean_pf: f64,
    pub rel_rmse: f64,
    /// Filled by [`run_batch`]; the filter alone does not see evaluations.
    pub mean_evals: Option<f64>,
    pub outlier_fraction: f64,
    pub tukey_flag_fraction: f64,
}

/// Drops estimates strictly above the linearly interpolated 99th
/// percentile, counts Tukey far-out values `x >= Q3 + 3 (Q3 - Q1)` without
/// dropping them, and returns the relRMSE of the kept estimates.
pub fn filter_and_stats(estimates: &[f64], reference_pf: f64) -> Result<BatchStats> {
    if !(reference_pf > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference probability must be positive, got {reference_pf}"
        )));
    }
    if estimates.len() < 2 {
        return Err(Error::InvalidArgument("need at least two estimates".into()));
    }
    if estimates.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("estimate".into()));
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p99 = quantile_sorted(&sorted, 0.99);
    let (q1, q3) = (quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75));
    let far_out = q3 + 3.0 * (q3 - q1);
    let kept: Vec<f64> = estimates.iter().copied().filter(|x| *x <= p99).collect();
    let n = estimates.len();
    let mse = kept.iter().map(|x| (x - reference_pf).powi(2)).sum::<f64>() / kept.len() as f64;
    Ok(BatchStats {
        n_trials: n,
        n_kept: kept.len(),
        mean_pf: mean(&kept),
        rel_rmse: mse.sqrt() / reference_pf,
        mean_evals: None,
        outlier_fraction: (n - kept.len()) as f64 / n as f64,
        tukey_flag_fraction: estimates.iter().filter(|x| **x >= far_out).count() as f64 / n as f64,
    })
}

/// One trial: the pipeline with the RNG seeded from `seed`.
pub fn run_trial(lsf: &LimitState, cfg: &PipelineConfig, seed: u64) -> Result<RunResult> {
    let mut rng = rng_from_seed(seed);
    let mut res = estimate_failure_probability(lsf, cfg, &mut rng)?;
    res.seed = Some(seed);
    Ok(res)
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub result: std::result::Result<RunResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub schema: u32,
    pub config: ExperimentConfig,
    pub reference_pf: Option<f64>,
    pub n_errors: usize,
    /// Mean over every successful trial, before filtering.
    pub raw_mean_pf: Option<f64>,
    pub stats: Option<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub summary: BatchSummary,
    pub trials: Vec<TrialOutcome>,
}

impl BatchOutput {
    pub fn estimates(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter_map(|t| t.result.as_ref().ok().map(|r| r.pf_estimate))
            .collect()
    }
}

/// Runs `cfg.trials` trials with seeds `base_seed + i`. Trial failures are
/// recorded per row and do not stop the batch. Files are written when
/// `out_dir` is set.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<BatchOutput> {
    cfg.validate()?;
    let lsf = cfg.limit_state()?;
    let pcfg = cfg.pipeline()?;
    let trial = |i: usize| {
        let seed = cfg.base_seed.wrapping_add(i as u64);
        TrialOutcome {
            seed,
            result: run_trial(&lsf, &pcfg, seed).map_err(|e| e.to_string()),
        }
    };
    let trials: Vec<TrialOutcome> = if cfg.deterministic {
        (0..cfg.trials).map(trial).collect()
    } else {
        (0..cfg.trials).into_par_iter().map(trial).collect()
    };

    let ok: Vec<&RunResult> = trials.iter().filter_map(|t| t.result.as_ref().ok()).collect();
    let estimates: Vec<f64> = ok.iter().map(|r| r.pf_estimate).collect();
    let reference_pf = lsf.reference_pf;
    let stats = match reference_pf {
        Some(p) if estimates.len() >= 2 => {
            let mut s = filter_and_stats(&estimates, p)?;
            s.mean_evals = Some(mean(&ok.iter().map(|r| r.eval_count as f64).collect::<Vec<_>>()));
            Some(s)
        }
        _ => None,
    };
    let out = BatchOutput {
        summary: BatchSummary {
            schema: SUMMARY_SCHEMA,
            config: cfg.clone(),
            reference_pf,
            n_errors: trials.len() - ok.len(),
            raw_mean_pf: (!estimates.is_empty()).then(|| mean(&estimates)),
            stats,
        },
        trials,
    };
    if let Some(dir) = &cfg.out_dir {
        write_outputs(&out, dir)?;
    }
    Ok(out)
}

fn flag_field(t: &TrialOutcome) -> String {
    match &t.result {
        Ok(r) => r.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";"),
        Err(e) => format!("error: {e}"),
    }
}

/// Per-trial CSV with the fixed column set.
pub fn write_trials_csv<W: Write>(trials: &[TrialOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIAL_COLUMNS)?;
    for t in trials {
        let row = match &t.result {
            Ok(r) => [
                t.seed.to_string(),
                r.pf_estimate.to_string(),
                r.n_levels.to_string(),
                r.eval_count.to_string(),
                r.failure_fraction_final.to_string(),
                flag_field(t),
            ],
            Err(_) => [
                t.seed.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                flag_field(t),
            ],
        };
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trials.csv`, `summary.json` and, for the first successful trial,
/// `model.json`.
pub fn write_outputs(out: &BatchOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trials_csv(&out.trials, fs::File::create(dir.join("trials.csv"))?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)? + "\n")?;
    if let Some(r) = out.trials.iter().find_map(|t| t.result.as_ref().ok()) {
        fs::write(dir.join("model.json"), r.model.to_json()? + "\n")?;
    }
    Ok(())
}

/// Indicator approximations for every `sigma`, one block of rows per value,
/// with columns `sigma, g, enkf, sis`.
pub fn emit_fig1_data<W: Write>(sigmas: &[f64], g_grid: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for &s in sigmas {
        for row in indicator_curves(g_grid, s)? {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub pf: f64,
    pub std_error: f64,
    pub n_samples: u64,
    pub n_failed: u64,
}

/// Crude Monte Carlo reference `P(G(U) <= 0)`. Samples are split into
/// chunks seeded `seed + chunk`, so the result does not depend on the
/// number of threads.
pub fn crude_monte_carlo(lsf: &LimitState, n: u64, seed: u64) -> Result<McEstimate> {
    const CHUNK: u64 = 100_000;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let d = lsf.dim();
    let n_chunks = n.div_ceil(CHUNK);
    let failed: u64 = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<u64> {
            let mut rng = rng_from_seed(seed.wrapping_add(c));
            let len = CHUNK.min(n - c * CHUNK);
            let mut u = vec![0.0; d];
            let mut k = 0;
            for _ in 0..len {
                u.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                if lsf.eval(&u)? <= 0.0 {
                    k += 1;
                }
            }
            Ok(k)
        })
        .collect::<Result<Vec<u64>>>()?
        .into_iter()
        .sum();
    let pf = failed as f64 / n as f64;
    Ok(McEstimate {
        pf,
        std_error: (pf * (1.0 - pf) / n as f64).sqrt(),
        n_samples: n,
        n_failed: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filter_examples() {
        let p = 1e-3;
        let s = filter_and_stats(&[p; 10], p).unwrap();
        assert_eq!((s.rel_rmse, s.n_kept), (0.0, 10));

        // 99th percentile sits at position 3.96, i.e. 96.04 p: only the max goes
        let s = filter_and_stats(&[p, p, p, p, 100.0 * p], p).unwrap();
        assert_eq!(s.n_kept, 4);
        assert!(s.rel_rmse.abs() < 1e-15);
        assert!((s.outlier_fraction - 0.2).abs() < 1e-15);

        // two points: the percentile is 1.49 p, so 1.5 p is dropped
        let s = filter_and_stats(&[0.5 * p, 1.5 * p], p).unwrap();
        assert_eq!(s.n_kept, 1);
        let s = filter_and_stats(&[0.5 * p, 1.5 * p, 1.5 * p], p).unwrap();
        assert_eq!(s.n_kept, 3);
        let expected = ((0.25 + 0.25 + 0.25) / 3.0f64).sqrt();
        assert!((s.rel_rmse - expected).abs() < 1e-12);
    }

    #[test]
    fn rel_rmse_of_symmetric_pair() {
        // ties at the top survive the strict inequality
        let p = 2e-3;
        let s = filter_and_stats(&[0.5 * p, 1.5 * p, 0.5 * p, 1.5 * p], p).unwrap();
        assert_eq!(s.n_kept, 4);
        assert!((s.rel_rmse - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tukey_values_are_counted_not_dropped() {
        // quartiles near 1.25 and 1.75, far-out fence near 3.25
        let mut xs: Vec<f64> = (0..197).map(|i| 1.0 + i as f64 / 197.0).collect();
        xs.extend([50.0, 60.0, 70.0]);
        let s = filter_and_stats(&xs, 1.0).unwrap();
        assert!((s.tukey_flag_fraction - 3.0 / 200.0).abs() < 1e-15);
        assert_eq!(s.n_kept, 198);
    }

    #[test]
    fn filter_errors() {
        assert!(filter_and_stats(&[1.0, 2.0], 0.0).is_err());
        assert!(filter_and_stats(&[1.0], 1.0).is_err());
        assert!(filter_and_stats(&[1.0, f64::NAN], 1.0).is_err());
    }

    #[test]
    fn fig1_rows() {
        let mut buf = Vec::new();
        emit_fig1_data(&[0.1, 1.0], &[-1.0, 0.0, 0.5, 2.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<crate::tempering::IndicatorRow> = rdr.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            if r.g <= 0.0 {
                assert_eq!(r.enkf, 1.0);
            }
            if r.g == 0.0 {
                assert_eq!(r.sis, 0.5);
            }
        }
        for block in rows.chunks(4) {
            for w in block.windows(2) {
                assert!(w[1].enkf <= w[0].enkf && w[1].sis <= w[0].sis);
            }
        }
        assert!(emit_fig1_data(&[0.0], &[0.0], Vec::new()).is_err());
    }

    #[test]
    fn config_json_and_validation() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"problem":"series","j":500,"localization":{"mode":"fixed","alpha":0.25},"k":4}"#)
                .unwrap();
        assert_eq!(cfg.localization, Localization::Fixed { alpha: 0.25 });
        assert_eq!(cfg.trials, 1);
        cfg.validate().unwrap();
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus":1}"#).is_err());
        let bad = ExperimentConfig {
            problem: "nope".into(),
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            trials: 0,
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn crude_mc_on_half_space() {
        let lsf = problem("affine(1,0,-1)").unwrap();
        let mc = crude_monte_carlo(&lsf, 250_000, 9).unwrap();
        let pf = crate::stats::normal_cdf(-1.0);
        assert!((mc.pf - pf).abs() < 3.0 * mc.std_error);
        assert_eq!(crude_monte_carlo(&lsf, 250_000, 9).unwrap(), mc);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn percentile_filter_removes_few(xs in prop::collection::vec(0.0f64..1.0, 2..400)) {
            let s = filter_and_stats(&xs, 0.5).unwrap();
            let n = xs.len();
            prop_assert!(s.n_kept <= n);
            prop_assert!(n - s.n_kept <= (0.01 * n as f64).ceil() as usize + 1);
            prop_assert!(s.rel_rmse >= 0.0);
        }
    }
}
