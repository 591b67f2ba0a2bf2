//! Side-by-side runs of several methods on one dataset and one reservoir.

use crate::config::{DataSource, ExperimentConfig, HmcSettings, Method, MethodParams, PcaSpec};
use crate::error::{AtStage, HarnessError, Stage};
use crate::experiment::{run_prepared, MeanSd, MetricsSummary, RunReport};
use crate::pipeline::{prepare, Prepared};
use resq::data::{SeasonalSpec, SplitSpec, SynthSpec};
use resq::prior::WeightPrior;
use resq::readout::Activation;
use resq::reservoir::ReservoirConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub method: Method,
    pub n_params: usize,
    pub n_runs: usize,
    pub test: MetricsSummary,
    pub test_recalibrated: Option<MetricsSummary>,
    pub validation_mse: MeanSd,
    pub train_secs: MeanSd,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<RunReport>,
}

impl Comparison {
    pub fn row(&self, method: Method) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("rows serialize")
    }

    /// One line per method with mean and sd columns for every metric.
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path).at(Stage::Output)?;
        let metrics = ["mse", "cal", "width95", "coverage95", "mcrps"];
        let mut header = vec!["label".to_string(), "method".into(), "n_params".into(), "n_runs".into()];
        for prefix in ["", "recal_"] {
            for m in metrics {
                header.push(format!("{prefix}{m}_mean"));
                header.push(format!("{prefix}{m}_sd"));
            }
        }
        header.extend(["validation_mse_mean".into(), "train_secs_mean".into(), "train_secs_sd".into()]);
        w.write_record(&header).at(Stage::Output)?;
        let cells = |s: Option<&MetricsSummary>| -> Vec<String> {
            match s {
                Some(s) => [s.mse, s.cal, s.width95, s.coverage95, s.mcrps]
                    .iter()
                    .flat_map(|m| [m.mean.to_string(), m.sd.to_string()])
                    .collect(),
                None => vec![String::new(); 10],
            }
        };
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), r.method.to_string(), r.n_params.to_string(), r.n_runs.to_string()];
            rec.extend(cells(Some(&r.test)));
            rec.extend(cells(r.test_recalibrated.as_ref()));
            rec.extend([r.validation_mse.mean.to_string(), r.train_secs.mean.to_string(), r.train_secs.sd.to_string()]);
            w.write_record(&rec).at(Stage::Output)?;
        }
        w.flush().at(Stage::Output)
    }

    /// `comparison.csv`, `comparison.json` and one subdirectory per method
    /// with its run outputs.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).at(Stage::Output)?;
        self.write_csv(&dir.join("comparison.csv"))?;
        std::fs::write(dir.join("comparison.json"), self.to_json()).at(Stage::Output)?;
        for report in &self.reports {
            report.write(&dir.join(&report.label), None)?;
        }
        Ok(())
    }
}

fn check_shared(cfgs: &[ExperimentConfig]) -> Result<(), HarnessError> {
    let first = &cfgs[0];
    for c in &cfgs[1..] {
        if c.data != first.data || c.exclude != first.exclude {
            return Err(HarnessError::Mismatch("dataset"));
        }
        if c.seasonal != first.seasonal || c.split != first.split {
            return Err(HarnessError::Mismatch("seasonal or split settings"));
        }
        if c.reservoir != first.reservoir || c.washout != first.washout {
            return Err(HarnessError::Mismatch("reservoir"));
        }
    }
    Ok(())
}

/// Runs every config against the same data and the reservoir built from
/// `reservoir_seed`. Configs must agree on dataset, split and reservoir.
pub fn compare_methods(cfgs: &[ExperimentConfig], reservoir_seed: u64) -> Result<Comparison, HarnessError> {
    if cfgs.is_empty() {
        return Err(HarnessError::Config("nothing to compare".into()));
    }
    let cfgs: Vec<ExperimentConfig> = cfgs
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.reservoir.seed = reservoir_seed;
            c
        })
        .collect();
    check_shared(&cfgs)?;
    let mut labels: Vec<String> = cfgs.iter().map(|c| c.label()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() != cfgs.len() {
        return Err(HarnessError::Config("compared configs need distinct names".into()));
    }
    for c in &cfgs {
        c.validate()?;
    }
    let mut cache: Vec<(Option<PcaSpec>, Prepared)> = Vec::new();
    let mut reports = Vec::with_capacity(cfgs.len());
    for cfg in &cfgs {
        let key = cfg.pca_spec();
        let pos = match cache.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                cache.push((key, prepare(cfg)?));
                cache.len() - 1
            }
        };
        reports.push(run_prepared(cfg, &cache[pos].1)?);
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            method: r.method,
            n_params: r.n_params,
            n_runs: r.n_runs,
            test: r.test,
            test_recalibrated: r.test_recalibrated,
            validation_mse: r.validation_mse,
            train_secs: r.train_secs,
        })
        .collect();
    Ok(Comparison { rows, reports })
}

/// The desk-scale synthetic study: a 2000-step seasonal series with period 7,
/// one-step horizon, a 100-unit reservoir and one config per method.
pub fn default_study(seed: u64) -> Vec<ExperimentConfig> {
    let base = ExperimentConfig {
        name: None,
        data: DataSource::Synthetic(SynthSpec { length: 2000, period: 7, trend: 0.001, noise_std: 0.2, seed }),
        exclude: Vec::new(),
        seasonal: SeasonalSpec::new(7, 1).expect("1 <= 7"),
        split: SplitSpec::default(),
        reservoir: ReservoirConfig { n_units: 100, seed, ..ReservoirConfig::default() },
        washout: 100,
        pca: None,
        method: Method::Qr,
        params: MethodParams::default(),
        levels: None,
        n_samples: 500,
        n_runs: 3,
        seed,
    };
    let with = |method: Method, params: MethodParams| ExperimentConfig {
        name: Some(method.name().to_string()),
        method,
        params,
        ..base.clone()
    };
    let hmc = Some(HmcSettings { n_leapfrog: Some(32), n_warmup: Some(300), n_samples: Some(500), ..HmcSettings::default() });
    let normal = Some(WeightPrior::Normal { std: 1.0 });
    vec![
        with(
            Method::Qr,
            MethodParams {
                layers: Some(2),
                units: Some(32),
                activation: Some(Activation::Relu),
                learning_rate: Some(1e-3),
                steps: Some(1500),
                batch_size: Some(128),
                ..MethodParams::default()
            },
        ),
        with(
            Method::Dropout,
            MethodParams {
                layers: Some(1),
                units: Some(32),
                activation: Some(Activation::Relu),
                learning_rate: Some(5e-3),
                steps: Some(300),
                batch_size: Some(64),
                keep_prob: Some(0.9),
                ..MethodParams::default()
            },
        ),
        with(
            Method::Vi,
            MethodParams {
                layers: Some(1),
                units: Some(16),
                activation: Some(Activation::Relu),
                learning_rate: Some(1e-2),
                steps: Some(1500),
                prior: normal,
                noise_upper: Some(1.0),
                ..MethodParams::default()
            },
        ),
        with(
            Method::Mcmc,
            MethodParams {
                layers: Some(1),
                units: Some(8),
                activation: Some(Activation::Tanh),
                prior: normal,
                noise_upper: Some(10.0),
                hmc,
                ..MethodParams::default()
            },
        ),
        with(
            Method::McmcPca,
            MethodParams {
                layers: Some(2),
                units: Some(16),
                activation: Some(Activation::Tanh),
                prior: normal,
                noise_upper: Some(10.0),
                hmc,
                ..MethodParams::default()
            },
        ),
        with(Method::Ssvs, MethodParams { hmc, ..MethodParams::default() }),
    ]
}
