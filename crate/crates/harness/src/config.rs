//! Experiment configuration as read from a JSON document.

use crate::error::HarnessError;
use resq::data::{ColumnSelector, CsvOptions, SeasonalSpec, SplitSpec, SynthSpec};
use resq::forecast::QuantileLevels;
use resq::hmc::HmcConfig;
use resq::metrics::{LOWER_95, UPPER_95};
use resq::prior::{NoisePrior, WeightPrior};
use resq::readout::{Activation, MlpSpec, OptimizerConfig, OptimizerKind};
use resq::reservoir::ReservoirConfig;
use resq::variational::{NoiseModel, ViConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Qr,
    Dropout,
    Vi,
    Mcmc,
    McmcPca,
    Ssvs,
}

impl Method {
    pub const ALL: [Method; 6] = [Self::Qr, Self::Dropout, Self::Vi, Self::Mcmc, Self::McmcPca, Self::Ssvs];

    pub fn name(self) -> &'static str {
        match self {
            Self::Qr => "qr",
            Self::Dropout => "dropout",
            Self::Vi => "vi",
            Self::Mcmc => "mcmc",
            Self::McmcPca => "mcmc_pca",
            Self::Ssvs => "ssvs",
        }
    }

    /// Produces a sample ensemble (and so can be recalibrated).
    pub fn is_ensemble(self) -> bool {
        self != Self::Qr
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, Self::Vi | Self::Mcmc | Self::McmcPca | Self::Ssvs)
    }

    pub fn uses_learning_rate(self) -> bool {
        matches!(self, Self::Qr | Self::Dropout | Self::Vi)
    }

    pub fn uses_hmc(self) -> bool {
        matches!(self, Self::Mcmc | Self::McmcPca | Self::Ssvs)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Csv {
        path: PathBuf,
        column: ColumnSelector,
        #[serde(default)]
        options: CsvOptions,
    },
}

/// Number of principal components kept, or the variance fraction to reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSpec {
    Components(usize),
    Fraction(f64),
}

impl Default for PcaSpec {
    fn default() -> Self {
        Self::Fraction(0.99)
    }
}

/// Sampler settings; unset fields take the [`HmcConfig`] defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcSettings {
    pub step_size: Option<f64>,
    pub n_leapfrog: Option<usize>,
    pub n_warmup: Option<usize>,
    pub n_samples: Option<usize>,
    pub target_accept: Option<f64>,
}

/// Readout and method hyperparameters. Fields that do not apply to the
/// chosen method must be left unset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodParams {
    /// Hidden layers; `0` is a linear readout. Default 1 (0 for ssvs).
    pub layers: Option<usize>,
    /// Width of the first hidden layer; each further layer halves it.
    pub units: Option<usize>,
    pub activation: Option<Activation>,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    /// Dropout keep probability.
    pub keep_prob: Option<f64>,
    pub prior: Option<WeightPrior>,
    /// Upper bound of the uniform prior on the noise variance.
    pub noise_upper: Option<f64>,
    pub rank: Option<usize>,
    pub n_mc: Option<usize>,
    pub hmc: Option<HmcSettings>,
}

fn default_washout() -> usize {
    100
}

fn default_n_samples() -> usize {
    500
}

fn default_n_runs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub data: DataSource,
    /// Half-open index ranges removed from the raw series before anything else.
    #[serde(default)]
    pub exclude: Vec<(usize, usize)>,
    pub seasonal: SeasonalSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub reservoir: ReservoirConfig,
    #[serde(default = "default_washout")]
    pub washout: usize,
    /// State compression before the readout. `mcmc_pca` defaults to a 0.99
    /// variance fraction when unset.
    #[serde(default)]
    pub pca: Option<PcaSpec>,
    pub method: Method,
    #[serde(default)]
    pub params: MethodParams,
    /// Metric levels; defaults to the 42-level grid.
    #[serde(default)]
    pub levels: Option<QuantileLevels>,
    /// Ensemble size for sample-based methods.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn reject(method: Method, field: &str) -> HarnessError {
    HarnessError::Config(format!("`{field}` does not apply to method {method}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn levels(&self) -> QuantileLevels {
        self.levels.clone().unwrap_or_else(QuantileLevels::default_grid)
    }

    pub fn pca_spec(&self) -> Option<PcaSpec> {
        match (self.method, self.pca) {
            (Method::McmcPca, None) => Some(PcaSpec::default()),
            (_, p) => p,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let m = self.method;
        let p = &self.params;
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if m.is_ensemble() && self.n_samples < 2 {
            return bad(format!("n_samples must be at least 2, got {}", self.n_samples));
        }
        self.split.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.reservoir.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let levels = self.levels();
        for need in [LOWER_95, 0.5, UPPER_95] {
            if levels.index_of(need).is_err() {
                return bad(format!("metric levels must include {need}"));
            }
        }
        match self.pca_spec() {
            Some(PcaSpec::Components(0)) => return bad("PCA needs at least one component".into()),
            Some(PcaSpec::Fraction(f)) if !(f > 0.0 && f <= 1.0) => return bad(format!("PCA fraction {f}")),
            _ => {}
        }
        if p.prior.is_some() && !m.uses_prior() {
            return Err(reject(m, "prior"));
        }
        if p.keep_prob.is_some() && m != Method::Dropout {
            return Err(reject(m, "keep_prob"));
        }
        if p.learning_rate.is_some() && !m.uses_learning_rate() {
            return Err(reject(m, "learning_rate"));
        }
        if p.steps.is_some() && !m.uses_learning_rate() {
            return Err(reject(m, "steps"));
        }
        if p.batch_size.is_some() && !matches!(m, Method::Qr | Method::Dropout) {
            return Err(reject(m, "batch_size"));
        }
        if p.noise_upper.is_some() && !matches!(m, Method::Vi | Method::Mcmc | Method::McmcPca) {
            return Err(reject(m, "noise_upper"));
        }
        if (p.rank.is_some() || p.n_mc.is_some()) && m != Method::Vi {
            return Err(reject(m, if p.rank.is_some() { "rank" } else { "n_mc" }));
        }
        if p.hmc.is_some() && !m.uses_hmc() {
            return Err(reject(m, "hmc"));
        }
        if m == Method::Ssvs {
            if p.layers.unwrap_or(0) != 0 || p.units.is_some() || p.activation.is_some() {
                return bad("ssvs uses a linear readout; leave layers, units and activation unset".into());
            }
            if p.prior.is_some_and(|pr| pr != WeightPrior::Horseshoe) {
                return bad("ssvs only supports the horseshoe prior".into());
            }
        } else if p.prior == Some(WeightPrior::Horseshoe) {
            return bad(format!("the horseshoe prior is only available with ssvs, not {m}"));
        }
        if let Some(prior) = p.prior {
            prior.validate().map_err(HarnessError::Config)?;
        }
        if p.units == Some(0) {
            return bad("units must be positive".into());
        }
        if let Some(k) = p.keep_prob {
            if !(k > 0.0 && k <= 1.0) {
                return bad(format!("keep_prob {k} outside (0, 1]"));
            }
        }
        if let Some(u) = p.noise_upper {
            if !(u > 0.0 && u.is_finite()) {
                return bad(format!("noise_upper {u}"));
            }
        }
        if m.uses_learning_rate() {
            self.optimizer(0).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if m.uses_hmc() {
            self.hmc(0).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Hidden widths `u, u/2, u/4, ...` (at least 1 each).
    pub fn hidden_widths(&self) -> Vec<usize> {
        let layers = self.params.layers.unwrap_or(if self.method == Method::Ssvs { 0 } else { 1 });
        let units = self.params.units.unwrap_or(32);
        (0..layers).map(|l| (units >> l).max(1)).collect()
    }

    pub fn activation(&self) -> Activation {
        self.params.activation.unwrap_or(Activation::Tanh)
    }

    pub fn readout_spec(&self, input: usize) -> MlpSpec {
        let outputs = if self.method == Method::Qr { self.levels().len() } else { 1 };
        MlpSpec::uniform(input, &self.hidden_widths(), self.activation(), outputs)
            .expect("validated widths are positive")
    }

    pub fn prior(&self) -> WeightPrior {
        match self.method {
            Method::Ssvs => WeightPrior::Horseshoe,
            _ => self.params.prior.unwrap_or(WeightPrior::Normal { std: 1.0 }),
        }
    }

    pub fn noise(&self) -> NoiseModel {
        let default_upper = if self.method == Method::Vi { 1.0 } else { 10.0 };
        NoiseModel::Learned(NoisePrior { upper: self.params.noise_upper.unwrap_or(default_upper) })
    }

    pub fn keep_prob(&self) -> f64 {
        self.params.keep_prob.unwrap_or(0.9)
    }

    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        let default_lr = if self.method == Method::Vi { 1e-2 } else { 1e-3 };
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: self.params.learning_rate.unwrap_or(default_lr),
            steps: self.params.steps.unwrap_or(2000),
            batch_size: self.params.batch_size,
            seed,
        }
    }

    pub fn vi(&self, seed: u64) -> ViConfig {
        let opt = self.optimizer(seed);
        ViConfig {
            rank: self.params.rank,
            steps: opt.steps,
            learning_rate: opt.learning_rate,
            n_mc: self.params.n_mc.unwrap_or(1),
            seed,
        }
    }

    pub fn hmc(&self, seed: u64) -> HmcConfig {
        let d = HmcConfig::default();
        let s = self.params.hmc.unwrap_or_default();
        HmcConfig {
            step_size: s.step_size.unwrap_or(d.step_size),
            n_leapfrog: s.n_leapfrog.unwrap_or(d.n_leapfrog),
            n_warmup: s.n_warmup.unwrap_or(d.n_warmup),
            n_samples: s.n_samples.unwrap_or(d.n_samples),
            target_accept: s.target_accept.unwrap_or(d.target_accept),
            jitter: d.jitter,
            seed,
        }
    }
}
