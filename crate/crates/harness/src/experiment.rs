//! One experiment: repeated seeded runs of a single method on prepared data.

use crate::config::{ExperimentConfig, Method};
use crate::error::{AtStage, HarnessError, Stage};
use crate::pipeline::{prepare, Prepared, SplitData};
use resq::data::SplitRole;
use resq::forecast::{PredictiveDistribution, QuantileForecast, QuantileLevels};
use resq::hmc::{posterior_predict_hmc, posterior_predict_ssvs, run_chain, ReadoutTarget, SsvsTarget};
use resq::mc_dropout::predict_mc_dropout;
use resq::metrics::{
    calibration_curve, evaluate, extract_quantiles, fit_recalibrator, recalibrate,
    write_calibration_csv, CalibrationCurve, MetricsReport,
};
use resq::quantile::{predict_quantiles, train_qr};
use resq::readout::{train_deterministic, Loss, Mlp};
use resq::rng::{derive_seed, seeded};
use resq::variational::{fit_vi, posterior_predict_vi, LikelihoodModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Self { mean, sd }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

/// Mean and standard deviation of each headline metric over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mse: MeanSd,
    pub cal: MeanSd,
    pub width95: MeanSd,
    pub coverage95: MeanSd,
    pub mcrps: MeanSd,
}

impl MetricsSummary {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            mse: col(|r| r.mse),
            cal: col(|r| r.cal),
            width95: col(|r| r.width95),
            coverage95: col(|r| r.coverage95),
            mcrps: col(|r| r.mcrps),
        }
    }
}

/// Forecasts and curves kept for CSV export; not part of the metric JSON.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub test_quantiles: QuantileForecast,
    pub test_recalibrated: Option<QuantileForecast>,
    pub curve_before: CalibrationCurve,
    pub curve_after: Option<CalibrationCurve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Median MSE on the calibration split, used for model selection.
    pub validation_mse: f64,
    pub validation_cal: f64,
    pub test: MetricsReport,
    /// Absent for QR, which is never recalibrated.
    pub test_recalibrated: Option<MetricsReport>,
    /// Method diagnostics such as final loss or acceptance rate.
    pub diagnostics: BTreeMap<String, f64>,
    /// Training or sampling time only.
    #[serde(skip)]
    pub train_secs: f64,
    #[serde(skip)]
    pub artifacts: Option<RunArtifacts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub method: Method,
    pub n_params: usize,
    pub n_features: usize,
    pub n_runs: usize,
    pub runs: Vec<RunRecord>,
    pub test: MetricsSummary,
    pub test_recalibrated: Option<MetricsSummary>,
    pub validation_mse: MeanSd,
    #[serde(skip)]
    pub train_secs: MeanSd,
}

#[derive(Serialize)]
struct Timings<'a> {
    label: &'a str,
    method: Method,
    train_secs: MeanSd,
    per_run: Vec<f64>,
}

impl RunReport {
    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `metrics.json` (deterministic), `timings.json`, and per-run
    /// quantile and calibration-curve CSVs.
    pub fn write(&self, dir: &Path, prep: Option<&Prepared>) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).at(Stage::Output)?;
        std::fs::write(dir.join("metrics.json"), self.metrics_json()).at(Stage::Output)?;
        let timings = Timings {
            label: &self.label,
            method: self.method,
            train_secs: self.train_secs,
            per_run: self.runs.iter().map(|r| r.train_secs).collect(),
        };
        let timings = serde_json::to_string_pretty(&timings).expect("timings serialize");
        std::fs::write(dir.join("timings.json"), timings).at(Stage::Output)?;
        for r in &self.runs {
            let Some(a) = &r.artifacts else { continue };
            a.test_quantiles.write_csv(&dir.join(format!("run{}_quantiles.csv", r.run))).at(Stage::Output)?;
            if let Some(q) = &a.test_recalibrated {
                q.write_csv(&dir.join(format!("run{}_quantiles_recalibrated.csv", r.run))).at(Stage::Output)?;
            }
            write_calibration_csv(&dir.join(format!("run{}_calibration.csv", r.run)), &a.curve_before, a.curve_after.as_ref())
                .at(Stage::Output)?;
        }
        if let Some(p) = prep {
            let mut w = csv::Writer::from_path(dir.join("test_truth.csv")).at(Stage::Output)?;
            w.write_record(["index", "truth"]).at(Stage::Output)?;
            for (k, y) in p.test.truths.iter().enumerate() {
                w.write_record([(p.test.first_target + k).to_string(), y.to_string()]).at(Stage::Output)?;
            }
            w.flush().at(Stage::Output)?;
        }
        Ok(())
    }
}

/// Cal- and test-split forecasts in the normalized, differenced scale.
struct Trained {
    cal: PredictiveDistribution,
    test: PredictiveDistribution,
    secs: f64,
    n_params: usize,
    diagnostics: BTreeMap<String, f64>,
}

fn train_and_predict(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<Trained, HarnessError> {
    let train = &prep.train.set;
    let spec = cfg.readout_spec(prep.n_features());
    let (train_seed, cal_seed, test_seed) = (derive_seed(seed, 0), derive_seed(seed, 1), derive_seed(seed, 2));
    let mut diagnostics = BTreeMap::new();
    let inputs = |part: &SplitData| part.set.inputs.clone();
    let ens = PredictiveDistribution::Ensemble;
    let n = cfg.n_samples;
    let started = Instant::now();
    let trained = match cfg.method {
        Method::Qr => {
            let model = train_qr(spec, &train.inputs, &train.targets, &cfg.levels(), &cfg.optimizer(train_seed)).at(Stage::Train)?;
            let secs = started.elapsed().as_secs_f64();
            diagnostics.insert("final_loss".into(), model.loss_trace.last().copied().unwrap_or(f64::NAN));
            let predict = |part: &SplitData| predict_quantiles(&model, &part.set.inputs).at(Stage::Predict);
            Trained {
                cal: PredictiveDistribution::Quantiles(predict(&prep.cal)?),
                test: PredictiveDistribution::Quantiles(predict(&prep.test)?),
                secs,
                n_params: model.mlp.n_params(),
                diagnostics,
            }
        }
        Method::Dropout => {
            let p = cfg.keep_prob();
            let init = Mlp::init(spec, &mut seeded(derive_seed(train_seed, 0)));
            let out = train_deterministic(init, &train.inputs, &train.targets, &Loss::Mse, &cfg.optimizer(train_seed), Some(p))
                .at(Stage::Train)?;
            let secs = started.elapsed().as_secs_f64();
            diagnostics.insert("final_loss".into(), out.loss_trace.last().copied().unwrap_or(f64::NAN));
            let predict = |part: &SplitData, s| predict_mc_dropout(&out.mlp, &inputs(part), p, n, s).at(Stage::Predict);
            Trained {
                cal: ens(predict(&prep.cal, cal_seed)?),
                test: ens(predict(&prep.test, test_seed)?),
                secs,
                n_params: out.mlp.n_params(),
                diagnostics,
            }
        }
        Method::Vi => {
            let model = LikelihoodModel { readout: spec, prior: cfg.prior(), noise: cfg.noise() };
            let fit = fit_vi(&model, &train.inputs, &train.targets, &cfg.vi(train_seed)).at(Stage::Train)?;
            let secs = started.elapsed().as_secs_f64();
            diagnostics.insert("final_elbo".into(), fit.elbo_trace.last().copied().unwrap_or(f64::NAN));
            diagnostics.insert("noise_variance".into(), fit.noise_variance());
            diagnostics.insert("clip_events".into(), fit.clip_events as f64);
            let predict = |part: &SplitData, s| posterior_predict_vi(&fit, &model, &inputs(part), n, s).at(Stage::Predict);
            Trained {
                cal: ens(predict(&prep.cal, cal_seed)?),
                test: ens(predict(&prep.test, test_seed)?),
                secs,
                n_params: model.readout.n_params(),
                diagnostics,
            }
        }
        Method::Mcmc | Method::McmcPca => {
            let n_params = spec.n_params();
            let init = Mlp::init(spec.clone(), &mut seeded(derive_seed(train_seed, 0)));
            let target = ReadoutTarget::new(spec, cfg.prior(), cfg.noise(), train.inputs.clone(), train.targets.clone())
                .at(Stage::Train)?;
            let q0 = target.default_init(&init.params, 0.1);
            let chain = run_chain(&target, &q0, &cfg.hmc(train_seed), &mut seeded(derive_seed(train_seed, 1))).at(Stage::Train)?;
            let secs = started.elapsed().as_secs_f64();
            diagnostics.insert("acceptance_rate".into(), chain.acceptance_rate);
            diagnostics.insert("step_size".into(), chain.step_size);
            diagnostics.insert("divergences".into(), chain.divergences as f64);
            diagnostics.insert("min_ess".into(), chain.ess.iter().copied().fold(f64::INFINITY, f64::min));
            let predict = |part: &SplitData, s| posterior_predict_hmc(&chain, &target, &inputs(part), n, s).at(Stage::Predict);
            Trained { cal: ens(predict(&prep.cal, cal_seed)?), test: ens(predict(&prep.test, test_seed)?), secs, n_params, diagnostics }
        }
        Method::Ssvs => {
            let target = SsvsTarget::new(train.inputs.clone(), train.targets.clone()).at(Stage::Train)?;
            let chain = run_chain(&target, &target.default_init(), &cfg.hmc(train_seed), &mut seeded(derive_seed(train_seed, 1)))
                .at(Stage::Train)?;
            let secs = started.elapsed().as_secs_f64();
            diagnostics.insert("acceptance_rate".into(), chain.acceptance_rate);
            diagnostics.insert("step_size".into(), chain.step_size);
            diagnostics.insert("divergences".into(), chain.divergences as f64);
            let predict = |part: &SplitData, s| posterior_predict_ssvs(&chain, &target, &inputs(part), n, s).at(Stage::Predict);
            Trained {
                cal: ens(predict(&prep.cal, cal_seed)?),
                test: ens(predict(&prep.test, test_seed)?),
                secs,
                n_params: target.n_coefficients(),
                diagnostics,
            }
        }
    };
    Ok(trained)
}

fn to_quantiles(forecast: &PredictiveDistribution, levels: &QuantileLevels) -> Result<QuantileForecast, HarnessError> {
    match forecast {
        PredictiveDistribution::Quantiles(q) => Ok(q.clone()),
        PredictiveDistribution::Ensemble(e) => extract_quantiles(e, levels).at(Stage::Evaluate),
    }
}

/// Validation metrics of a single training run on the calibration split.
#[derive(Debug, Clone, Copy)]
pub struct Validation {
    pub mse: f64,
    pub cal: f64,
    pub n_params: usize,
}

/// Trains once with the run-0 seed and scores the calibration split only.
pub fn validate_once(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Validation, HarnessError> {
    let trained = train_and_predict(cfg, prep, derive_seed(cfg.seed, 0))?;
    let cal = to_quantiles(&prep.to_original(&trained.cal, &prep.cal)?, &cfg.levels())?;
    let m = evaluate(&cal, &prep.cal.truths).at(Stage::Evaluate)?;
    Ok(Validation { mse: m.mse, cal: m.cal, n_params: trained.n_params })
}

fn run_once(cfg: &ExperimentConfig, prep: &Prepared, run: usize) -> Result<(RunRecord, usize), HarnessError> {
    let seed = derive_seed(cfg.seed, run as u64);
    let levels = cfg.levels();
    let trained = train_and_predict(cfg, prep, seed)?;
    let cal_orig = prep.to_original(&trained.cal, &prep.cal)?;
    let test_orig = prep.to_original(&trained.test, &prep.test)?;
    let q_cal = to_quantiles(&cal_orig, &levels)?;
    let q_test = to_quantiles(&test_orig, &levels)?;
    let validation = evaluate(&q_cal, &prep.cal.truths).at(Stage::Evaluate)?;
    let test = evaluate(&q_test, &prep.test.truths).at(Stage::Evaluate)?;
    let curve_before = calibration_curve(&q_test, &prep.test.truths).at(Stage::Evaluate)?;
    let (test_recalibrated, q_recal, curve_after) = if cfg.method.is_ensemble() {
        let cal_curve = calibration_curve(&q_cal, &prep.cal.truths).at(Stage::Recalibrate)?;
        let map = fit_recalibrator(&cal_curve, SplitRole::Calibration).at(Stage::Recalibrate)?;
        let q = recalibrate(&map, &test_orig, &levels).at(Stage::Recalibrate)?;
        let m = evaluate(&q, &prep.test.truths).at(Stage::Evaluate)?;
        let curve = calibration_curve(&q, &prep.test.truths).at(Stage::Evaluate)?;
        (Some(m), Some(q), Some(curve))
    } else {
        (None, None, None)
    };
    let record = RunRecord {
        run,
        seed,
        validation_mse: validation.mse,
        validation_cal: validation.cal,
        test,
        test_recalibrated,
        diagnostics: trained.diagnostics,
        train_secs: trained.secs,
        artifacts: Some(RunArtifacts { test_quantiles: q_test, test_recalibrated: q_recal, curve_before, curve_after }),
    };
    Ok((record, trained.n_params))
}

/// Runs `cfg.n_runs` seeded repetitions on already prepared data.
pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.n_runs);
    let mut n_params = 0;
    for run in 0..cfg.n_runs {
        let (record, np) = run_once(cfg, prep, run)?;
        n_params = np;
        runs.push(record);
    }
    let test = MetricsSummary::of(&runs.iter().map(|r| r.test).collect::<Vec<_>>());
    let recal: Option<Vec<MetricsReport>> = runs.iter().map(|r| r.test_recalibrated).collect();
    Ok(RunReport {
        label: cfg.label(),
        method: cfg.method,
        n_params,
        n_features: prep.n_features(),
        n_runs: runs.len(),
        test,
        test_recalibrated: recal.map(|r| MetricsSummary::of(&r)),
        validation_mse: MeanSd::of(&runs.iter().map(|r| r.validation_mse).collect::<Vec<_>>()),
        train_secs: MeanSd::of(&runs.iter().map(|r| r.train_secs).collect::<Vec<_>>()),
        runs,
    })
}

/// Ingest through evaluation for every run of one config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}
