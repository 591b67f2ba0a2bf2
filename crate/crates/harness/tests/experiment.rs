use resq::data::SynthSpec;
use resq::readout::Activation;
use resq_harness::{
    compare_methods, default_study, grid_search, run_experiment, DataSource, ExperimentConfig, GridSpec, HarnessError,
    HmcSettings, Method, MethodParams,
};
use std::process::Command;

fn small(method: Method) -> ExperimentConfig {
    let mut cfg = default_study(2).into_iter().find(|c| c.method == method).unwrap();
    cfg.data = DataSource::Synthetic(SynthSpec { length: 400, period: 7, trend: 0.0, noise_std: 0.2, seed: 2 });
    cfg.reservoir.n_units = 30;
    cfg.washout = 30;
    cfg.n_runs = 1;
    cfg.n_samples = 50;
    let hmc = Some(HmcSettings { n_leapfrog: Some(8), n_warmup: Some(50), n_samples: Some(50), ..HmcSettings::default() });
    cfg.params = match method {
        Method::Qr | Method::Dropout | Method::Vi => MethodParams { steps: Some(100), ..cfg.params },
        _ => MethodParams { hmc, ..cfg.params },
    };
    cfg
}

#[test]
fn every_method_runs_and_reports_finite_metrics() {
    for method in Method::ALL {
        let report = run_experiment(&small(method)).unwrap();
        assert_eq!(report.runs.len(), 1);
        let t = report.test;
        for v in [t.mse.mean, t.cal.mean, t.width95.mean, t.coverage95.mean, t.mcrps.mean] {
            assert!(v.is_finite(), "{method}: {t:?}");
        }
        assert!((0.0..=1.0).contains(&t.coverage95.mean));
        assert_eq!(report.test_recalibrated.is_some(), method != Method::Qr, "{method}");
    }
}

#[test]
fn repeated_runs_get_distinct_seeds() {
    let mut cfg = small(Method::Dropout);
    cfg.n_runs = 3;
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.runs.len(), 3);
    let mut seeds: Vec<u64> = report.runs.iter().map(|r| r.seed).collect();
    seeds.dedup();
    assert_eq!(seeds.len(), 3);
    assert!(report.test.mse.sd > 0.0);
}

#[test]
fn same_config_gives_identical_metrics() {
    let cfg = small(Method::Vi);
    let a = run_experiment(&cfg).unwrap().metrics_json();
    let b = run_experiment(&cfg).unwrap().metrics_json();
    assert_eq!(a, b);
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(Method::Qr)).unwrap();
    report.write(dir.path(), None).unwrap();
    for f in ["metrics.json", "timings.json", "run0_quantiles.csv", "run0_calibration.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let back: resq_harness::RunReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(back.test, report.test);
}

#[test]
fn grid_counts_and_ranks_candidates() {
    let grid = GridSpec {
        layers: vec![1, 2, 3],
        activation: vec![Activation::Tanh, Activation::Relu],
        ..GridSpec::default()
    };
    assert_eq!(grid.size(), 6);
    let result = grid_search(&grid, &small(Method::Qr), 2).unwrap();
    assert_eq!(result.size, 6);
    assert_eq!(result.leaderboard.len() + result.failures.len(), 6);
    assert!(result.leaderboard.windows(2).all(|w| w[0].validation_mse <= w[1].validation_mse));
    assert_eq!(result.best.params.layers, result.leaderboard[0].candidate.layers);
}

#[test]
fn grid_results_do_not_depend_on_thread_count() {
    let grid = GridSpec { units: vec![4, 8], ..GridSpec::default() };
    let base = small(Method::Qr);
    let one = grid_search(&grid, &base, 1).unwrap();
    let many = grid_search(&grid, &base, 3).unwrap();
    assert_eq!(serde_json::to_string(&one.leaderboard).unwrap(), serde_json::to_string(&many.leaderboard).unwrap());
}

#[test]
fn singleton_grid_keeps_the_base_config() {
    let base = small(Method::Qr);
    let result = grid_search(&GridSpec::default(), &base, 1).unwrap();
    assert_eq!(result.size, 1);
    assert_eq!(result.best, base);
}

#[test]
fn default_grid_only_searches_applicable_axes() {
    assert!(GridSpec::default_for(Method::Qr).prior.is_empty());
    assert!(GridSpec::default_for(Method::Qr).keep_prob.is_empty());
    assert_eq!(GridSpec::default_for(Method::Dropout).keep_prob.len(), 5);
    assert!(GridSpec::default_for(Method::Mcmc).learning_rate.is_empty());
    assert_eq!(GridSpec::default_for(Method::Ssvs).size(), 1);
}

#[test]
fn comparison_has_one_row_per_method() {
    let cfgs = vec![small(Method::Qr), small(Method::Dropout)];
    let cmp = compare_methods(&cfgs, 9).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert!(cmp.row(Method::Qr).unwrap().test_recalibrated.is_none());
    assert!(cmp.row(Method::Dropout).unwrap().test_recalibrated.is_some());
    let dir = tempfile::tempdir().unwrap();
    cmp.write(dir.path()).unwrap();
    assert!(dir.path().join("comparison.csv").exists());
    assert!(dir.path().join("dropout").join("metrics.json").exists());
}

#[test]
fn comparison_rejects_different_datasets() {
    let mut other = small(Method::Dropout);
    other.data = DataSource::Synthetic(SynthSpec { length: 401, period: 7, trend: 0.0, noise_std: 0.2, seed: 2 });
    let err = compare_methods(&[small(Method::Qr), other], 0).unwrap_err();
    assert!(matches!(err, HarnessError::Mismatch(_)), "{err}");
}

#[test]
fn cli_reports_config_errors_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut cfg = serde_json::to_value(small(Method::Qr)).unwrap();
    cfg["params"]["prior"] = serde_json::json!({ "kind": "normal", "std": 1.0 });
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_resq")).arg("run").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("[config]"), "{stderr}");
}

#[test]
fn cli_run_writes_outputs_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qr.json");
    std::fs::write(&path, small(Method::Qr).to_json()).unwrap();
    let out_dir = dir.path().join("out");
    let bin = env!("CARGO_BIN_EXE_resq");
    let run = Command::new(bin).arg("run").arg(&path).arg("--out").arg(&out_dir).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out_dir.join("config.json").exists());
    let report = Command::new(bin).arg("report").arg(out_dir.join("metrics.json")).output().unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("mse"));
}

#[test]
fn cli_synth_then_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    let bin = env!("CARGO_BIN_EXE_resq");
    let synth = Command::new(bin).args(["synth", "--length", "100", "--out"]).arg(&csv).output().unwrap();
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    let ingest = Command::new(bin).arg("ingest").arg(&csv).args(["--column", "0"]).output().unwrap();
    assert!(ingest.status.success(), "{}", String::from_utf8_lossy(&ingest.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&ingest.stdout).unwrap();
    assert_eq!(summary["length"], 100);
}
