//! Forecast containers shared by every readout: quantile grids, quantile
//! forecasts and sample ensembles.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("quantile levels must be strictly increasing and inside (0, 1)")]
    InvalidLevels,
    #[error("quantile level {0} is not part of the level grid")]
    MissingLevel(f64),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("forecast contains a non-finite value at step {0}")]
    NonFinite(usize),
}

const LEVEL_EPS: f64 = 1e-12;

/// Strictly increasing quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self, ForecastError> {
        let ok = !levels.is_empty()
            && levels.iter().all(|&t| t > 0.0 && t < 1.0)
            && levels.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self(levels))
        } else {
            Err(ForecastError::InvalidLevels)
        }
    }

    /// The 42-level default grid: 0.005, 0.01, 0.025, then 0.05..=0.95 in
    /// steps of 0.025, then 0.975 and 0.99.
    pub fn default_grid() -> Self {
        let mut levels = vec![0.005, 0.01, 0.025];
        // k / 40 is correctly rounded, so 0.5, 0.025 etc. match their literals
        levels.extend((2..=38).map(|k| k as f64 / 40.0));
        levels.extend([0.975, 0.99]);
        debug_assert_eq!(levels.len(), 42);
        Self(levels)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, level: f64) -> Result<usize, ForecastError> {
        self.0
            .iter()
            .position(|&t| (t - level).abs() < LEVEL_EPS)
            .ok_or(ForecastError::MissingLevel(level))
    }
}

impl TryFrom<Vec<f64>> for QuantileLevels {
    type Error = ForecastError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<QuantileLevels> for Vec<f64> {
    fn from(l: QuantileLevels) -> Self {
        l.0
    }
}

/// Per-step quantiles aligned to a level grid, stored row-major (T x K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    levels: QuantileLevels,
    values: Vec<f64>,
}

impl QuantileForecast {
    pub fn new(levels: QuantileLevels, values: Vec<f64>) -> Result<Self, ForecastError> {
        let k = levels.len();
        if !values.len().is_multiple_of(k) {
            return Err(ForecastError::Shape { expected: (values.len() / k + 1) * k, got: values.len() });
        }
        Ok(Self { levels, values })
    }

    /// Builds a forecast from raw per-head outputs, sorting each step so the
    /// quantiles never cross.
    pub fn from_unsorted(levels: QuantileLevels, mut values: Vec<f64>) -> Result<Self, ForecastError> {
        let k = levels.len();
        if !values.len().is_multiple_of(k) {
            return Err(ForecastError::Shape { expected: (values.len() / k + 1) * k, got: values.len() });
        }
        for row in values.chunks_mut(k) {
            row.sort_by(f64::total_cmp);
        }
        Ok(Self { levels, values })
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.levels.len()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        let k = self.levels.len();
        &self.values[t * k..(t + 1) * k]
    }

    pub fn steps(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.levels.len())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column of quantiles at `level` across all steps.
    pub fn at_level(&self, level: f64) -> Result<Vec<f64>, ForecastError> {
        let i = self.levels.index_of(level)?;
        Ok(self.steps().map(|row| row[i]).collect())
    }

    pub fn is_non_crossing(&self) -> bool {
        self.steps().all(|row| row.windows(2).all(|w| w[0] <= w[1]))
    }

    /// Applies a per-step affine map `a * q + b[t]` (a > 0 keeps ordering).
    pub fn map_affine(&self, scale: f64, shift: &[f64]) -> Self {
        let k = self.levels.len();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &q)| scale * q + shift[i / k])
            .collect();
        Self { levels: self.levels.clone(), values }
    }

    /// CSV with a header naming the levels and one row per step.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = self.levels.as_slice().iter().map(|t| format!("q{t}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.steps() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleSource {
    Dropout,
    Vi,
    Hmc,
}

/// M sampled outputs per step, stored row-major (T x M).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    n_samples: usize,
    values: Vec<f64>,
    pub source: EnsembleSource,
}

impl EnsembleForecast {
    pub fn new(n_samples: usize, values: Vec<f64>, source: EnsembleSource) -> Result<Self, ForecastError> {
        if n_samples == 0 || !values.len().is_multiple_of(n_samples) {
            return Err(ForecastError::Shape { expected: n_samples, got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ForecastError::NonFinite(i / n_samples));
        }
        Ok(Self { n_samples, values, source })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.n_samples
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_samples..(t + 1) * self.n_samples]
    }

    pub fn steps(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_samples)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map_affine(&self, scale: f64, shift: &[f64]) -> Self {
        let m = self.n_samples;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| scale * v + shift[i / m])
            .collect();
        Self { n_samples: m, values, source: self.source }
    }

    pub fn step_mean(&self, t: usize) -> f64 {
        let s = self.step(t);
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Unbiased per-step sample variance.
    pub fn step_variance(&self, t: usize) -> f64 {
        let s = self.step(t);
        if s.len() < 2 {
            return 0.0;
        }
        let m = self.step_mean(t);
        s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64
    }

    /// Debug export: one row per step, one column per sample.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in self.steps() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        out.flush()
    }
}

/// Forecast uncertainty as produced by one of the readout methods.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveDistribution {
    Ensemble(EnsembleForecast),
    Quantiles(QuantileForecast),
}

impl PredictiveDistribution {
    pub fn n_steps(&self) -> usize {
        match self {
            Self::Ensemble(e) => e.n_steps(),
            Self::Quantiles(q) => q.n_steps(),
        }
    }

    pub fn map_affine(&self, scale: f64, shift: &[f64]) -> Self {
        match self {
            Self::Ensemble(e) => Self::Ensemble(e.map_affine(scale, shift)),
            Self::Quantiles(q) => Self::Quantiles(q.map_affine(scale, shift)),
        }
    }
}
