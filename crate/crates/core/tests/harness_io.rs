use std::fs;

use enkf_rare::harness::{run_batch, run_trial, BatchSummary, ExperimentConfig, SUMMARY_SCHEMA, TRIAL_COLUMNS};
use enkf_rare::mixtures::Family;

fn small(problem: &str) -> ExperimentConfig {
    ExperimentConfig {
        problem: problem.into(),
        j: 300,
        delta_target: 1.0,
        family: Family::Gm,
        trials: 4,
        base_seed: 11,
        ..ExperimentConfig::default()
    }
}

#[test]
fn parallel_and_sequential_batches_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_batch(&ExperimentConfig {
        out_dir: Some(a.path().into()),
        ..small("convex")
    })
    .unwrap();
    run_batch(&ExperimentConfig {
        out_dir: Some(b.path().into()),
        deterministic: true,
        ..small("convex")
    })
    .unwrap();
    for f in ["trials.csv", "model.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.path().join("trials.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), TRIAL_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 5);

    let summary: BatchSummary = serde_json::from_str(&fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.schema, SUMMARY_SCHEMA);
    assert_eq!(summary.n_errors, 0);
    assert_eq!(summary.stats.unwrap().n_trials, 4);
}

#[test]
fn batch_trial_equals_single_trial_with_the_same_seed() {
    let cfg = small("convex");
    let out = run_batch(&ExperimentConfig { trials: 2, ..cfg.clone() }).unwrap();
    let single = run_trial(&cfg.limit_state().unwrap(), &cfg.pipeline().unwrap(), cfg.base_seed + 1).unwrap();
    let second = out.trials[1].result.as_ref().unwrap();
    assert_eq!(out.trials[1].seed, 12);
    assert_eq!(second.pf_estimate, single.pf_estimate);
    assert_eq!(second.eval_count, single.eval_count);
}

#[test]
fn config_file_round_trips_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let cfg = small("affine(1,0,-2)");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::from_json_file(&path).unwrap(), cfg);
    assert!((cfg.limit_state().unwrap().reference_pf.unwrap() - 0.022_750_131_948_179_2).abs() < 1e-12);

    fs::write(&path, r#"{"problem": "convex", "ensemble": 10}"#).unwrap();
    assert!(ExperimentConfig::from_json_file(&path).is_err());
}
