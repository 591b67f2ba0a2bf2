//! Univariate series ingestion, normalization, seasonal differencing,
//! chronological splitting and supervised-pair construction.

use crate::forecast::PredictiveDistribution;
use crate::reservoir::StateSequence;
use crate::rng::seeded;
use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0} not found")]
    MissingColumn(String),
    #[error("row {row}: cell {cell:?} is not a finite number")]
    NonNumeric { row: u64, cell: String },
    #[error("column {0} has no values")]
    EmptyColumn(String),
    #[error("series needs at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("series has zero variance (std {0:e})")]
    ZeroVariance(f64),
    #[error("invalid seasonal spec: lag {s}, horizon {h} (need 1 <= h <= s)")]
    Seasonal { s: usize, h: usize },
    #[error("invalid split fractions {0:?}")]
    SplitFractions([f64; 3]),
    #[error("split of {len} samples leaves the {part} part empty")]
    EmptySplit { len: usize, part: &'static str },
    #[error("period must be positive")]
    Period,
    #[error("forecast horizon must be at least 1 and below {usable}, got {h}")]
    Horizon { h: usize, usable: usize },
    #[error("exclusion range {start}..{end} is invalid for length {len}")]
    Exclusion { start: usize, end: usize, len: usize },
    #[error("reconstruction needs history index {index}, history has {len} values")]
    History { index: usize, len: usize },
}

/// Which chronological part of a series a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub name: String,
    values: Vec<f64>,
    /// Sampling interval in seconds.
    pub step_secs: u64,
    pub role: Option<SplitRole>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>, step_secs: u64) -> Result<Self, DataError> {
        let name = name.into();
        if values.is_empty() {
            return Err(DataError::EmptyColumn(name));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonNumeric { row: i as u64 + 1, cell: values[i].to_string() });
        }
        Ok(Self { name, values, step_secs, role: None })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self { name: self.name.clone(), values, step_secs: self.step_secs, role: self.role }
    }

    /// Drops the half-open index ranges in `ranges` and concatenates the rest.
    pub fn without_ranges(&self, ranges: &[(usize, usize)]) -> Result<Self, DataError> {
        let len = self.len();
        let mut keep = vec![true; len];
        for &(start, end) in ranges {
            if start >= end || end > len {
                return Err(DataError::Exclusion { start, end, len });
            }
            keep[start..end].iter_mut().for_each(|k| *k = false);
        }
        let values: Vec<f64> = self.values.iter().zip(&keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
        if values.is_empty() {
            return Err(DataError::EmptyColumn(self.name.clone()));
        }
        Ok(self.with_values(values))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSelector {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for ColumnSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Index(i) => write!(f, "#{i}"),
            Self::Name(n) => write!(f, "{n:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub has_header: bool,
    pub step_secs: u64,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { has_header: true, step_secs: 3600 }
    }
}

/// Reads one column of a CSV file. Errors name the 1-based file line of
/// the first bad cell.
pub fn load_csv(path: &Path, column: &ColumnSelector, opts: CsvOptions) -> Result<TimeSeries, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(opts.has_header).flexible(true).from_reader(file);
    let index = match column {
        ColumnSelector::Index(i) => *i,
        ColumnSelector::Name(name) => {
            if !opts.has_header {
                return Err(DataError::MissingColumn(column.to_string()));
            }
            reader
                .headers()?
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| DataError::MissingColumn(column.to_string()))?
        }
    };
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let cell = record.get(index).ok_or_else(|| DataError::MissingColumn(column.to_string()))?;
        match cell.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ => return Err(DataError::NonNumeric { row, cell: cell.to_string() }),
        }
    }
    let name = path.file_stem().map_or_else(|| "series".into(), |s| s.to_string_lossy().into_owned());
    if values.is_empty() {
        return Err(DataError::EmptyColumn(column.to_string()));
    }
    TimeSeries::new(name, values, opts.step_secs)
}

pub fn write_csv(series: &TimeSeries, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([series.name.as_str()])?;
    for v in series.values() {
        w.write_record([v.to_string()])?;
    }
    w.flush().map_err(io)
}

/// Mean and standard deviation of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    /// Role of the series the statistics were computed on.
    pub fitted_on: Option<SplitRole>,
}

pub const MIN_STD: f64 = 1e-12;

/// Population (ddof = 0) mean and standard deviation.
pub fn fit_normalizer(train: &TimeSeries) -> Result<NormStats, DataError> {
    if train.len() < 2 {
        return Err(DataError::TooShort { needed: 2, got: train.len() });
    }
    let n = train.len() as f64;
    let mean = train.values.iter().sum::<f64>() / n;
    let var = train.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > MIN_STD) {
        return Err(DataError::ZeroVariance(std));
    }
    Ok(NormStats { mean, std, fitted_on: train.role })
}

pub fn apply_normalizer(series: &TimeSeries, stats: &NormStats) -> TimeSeries {
    series.with_values(series.values.iter().map(|v| (v - stats.mean) / stats.std).collect())
}

pub fn invert_normalizer(series: &TimeSeries, stats: &NormStats) -> TimeSeries {
    series.with_values(series.values.iter().map(|v| v * stats.std + stats.mean).collect())
}

/// Seasonal lag `s` and forecast horizon `h`, with `1 <= h <= s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSeasonal")]
pub struct SeasonalSpec {
    s: usize,
    h: usize,
}

#[derive(Deserialize)]
struct RawSeasonal {
    s: usize,
    h: usize,
}

impl TryFrom<RawSeasonal> for SeasonalSpec {
    type Error = DataError;
    fn try_from(r: RawSeasonal) -> Result<Self, DataError> {
        Self::new(r.s, r.h)
    }
}

impl SeasonalSpec {
    pub fn new(s: usize, h: usize) -> Result<Self, DataError> {
        if s == 0 || h == 0 || h > s {
            return Err(DataError::Seasonal { s, h });
        }
        Ok(Self { s, h })
    }

    pub fn lag(&self) -> usize {
        self.s
    }

    pub fn horizon(&self) -> usize {
        self.h
    }
}

/// `out[i] = x[i + s] - x[i]`, i.e. the differenced value at original time `i + s`.
pub fn seasonal_difference(series: &TimeSeries, spec: SeasonalSpec) -> Result<TimeSeries, DataError> {
    let s = spec.s;
    if series.len() <= s {
        return Err(DataError::TooShort { needed: s + 1, got: series.len() });
    }
    let values = series.values.windows(s + 1).map(|w| w[s] - w[0]).collect();
    Ok(series.with_values(values))
}

/// Undoes seasonal differencing on a forecast. Step `k` of `forecast`
/// predicts original index `first_target + k`; the lagged observation
/// `history[first_target + k - s]` is added to every sample or quantile.
/// Because `h <= s` that observation is already known when the forecast is
/// issued, so the shift carries no uncertainty.
pub fn reconstruct_forecast(
    forecast: &PredictiveDistribution,
    history: &TimeSeries,
    spec: SeasonalSpec,
    first_target: usize,
) -> Result<PredictiveDistribution, DataError> {
    if spec.h > spec.s {
        return Err(DataError::Seasonal { s: spec.s, h: spec.h });
    }
    let n = forecast.n_steps();
    if first_target < spec.s {
        return Err(DataError::History { index: first_target, len: history.len() });
    }
    let last = first_target + n - spec.s;
    if n > 0 && last > history.len() {
        return Err(DataError::History { index: last - 1, len: history.len() });
    }
    let base = &history.values[first_target - spec.s..first_target - spec.s + n];
    Ok(forecast.map_affine(1.0, base))
}

/// Chronological train / calibration / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub cal_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_frac: 0.7, cal_frac: 0.15, test_frac: 0.15 }
    }
}

/// Sizes of the three contiguous parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub cal: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let f = [self.train_frac, self.cal_frac, self.test_frac];
        let ok = self.train_frac > 0.0
            && self.train_frac < 1.0
            && self.cal_frac >= 0.0
            && self.test_frac >= 0.0
            && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DataError::SplitFractions(f))
        }
    }

    /// Train gets `floor(train_frac * len)`; the remainder is divided in
    /// proportion `cal : test`, rounding the calibration share down so any
    /// extra sample goes to test.
    pub fn sizes(&self, len: usize) -> Result<SplitSizes, DataError> {
        self.validate()?;
        let train = ((self.train_frac * len as f64) + 1e-9).floor() as usize;
        let rest = len - train.min(len);
        let share = self.cal_frac / (self.cal_frac + self.test_frac);
        let cal = ((share * rest as f64) + 1e-9).floor() as usize;
        let sizes = SplitSizes { train, cal, test: rest - cal };
        for (n, part) in [(sizes.train, "train"), (sizes.cal, "calibration"), (sizes.test, "test")] {
            if n == 0 {
                return Err(DataError::EmptySplit { len, part });
            }
        }
        Ok(sizes)
    }
}

pub struct Splits {
    pub train: TimeSeries,
    pub cal: TimeSeries,
    pub test: TimeSeries,
}

pub fn split(series: &TimeSeries, spec: &SplitSpec) -> Result<Splits, DataError> {
    let sz = spec.sizes(series.len())?;
    let part = |range: std::ops::Range<usize>, role| {
        let mut s = series.with_values(series.values[range].to_vec());
        s.role = Some(role);
        s
    };
    Ok(Splits {
        train: part(0..sz.train, SplitRole::Train),
        cal: part(sz.train..sz.train + sz.cal, SplitRole::Calibration),
        test: part(sz.train + sz.cal..series.len(), SplitRole::Test),
    })
}

/// Parameters of the synthetic seasonal generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub period: usize,
    /// Linear trend per step.
    pub trend: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// `sin(2 pi t / period) + trend * t + N(0, noise_std^2)`.
pub fn synth_seasonal(spec: &SynthSpec) -> Result<TimeSeries, DataError> {
    if spec.period == 0 {
        return Err(DataError::Period);
    }
    if spec.length <= 2 * spec.period {
        return Err(DataError::TooShort { needed: 2 * spec.period + 1, got: spec.length });
    }
    if !(spec.noise_std >= 0.0) {
        return Err(DataError::SplitFractions([spec.noise_std, 0.0, 0.0]));
    }
    let mut rng = seeded(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("noise_std checked non-negative");
    let omega = std::f64::consts::TAU / spec.period as f64;
    let values = (0..spec.length)
        .map(|t| {
            let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // reduce the phase modulo the period so exact periodicity survives rounding
            ((t % spec.period) as f64 * omega).sin() + spec.trend * t as f64 + eps
        })
        .collect();
    TimeSeries::new(format!("synth_p{}_s{}", spec.period, spec.seed), values, 3600)
}

/// `(state, target)` pairs for the readout. Row `k` of `inputs` is the
/// reservoir state at series index `series_index[k]`; `targets[k]` is the
/// series value `h` steps later, at `target_index[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedSet {
    pub inputs: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub series_index: Vec<usize>,
    pub target_index: Vec<usize>,
}

impl SupervisedSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.ncols()
    }

    /// Pairs at positions `idx` in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            series_index: idx.iter().map(|&i| self.series_index[i]).collect(),
            target_index: idx.iter().map(|&i| self.target_index[i]).collect(),
        }
    }

    /// Same pairs with the inputs replaced (e.g. after PCA).
    pub fn with_inputs(&self, inputs: DMatrix<f64>) -> Self {
        assert_eq!(inputs.nrows(), self.len());
        Self { inputs, ..self.clone() }
    }
}

/// Pairs the state at series index `t` with `targets[t + h]`. `targets` is
/// the series the reservoir was driven with, so state row `k` sits at index
/// `k + washout`.
pub fn make_supervised(states: &StateSequence, targets: &TimeSeries, h: usize) -> Result<SupervisedSet, DataError> {
    let usable = states.len();
    if h == 0 || h >= usable {
        return Err(DataError::Horizon { h, usable });
    }
    let w = states.washout_dropped;
    if targets.len() < w + usable {
        return Err(DataError::TooShort { needed: w + usable, got: targets.len() });
    }
    let n = usable - h;
    let series_index: Vec<usize> = (w..w + n).collect();
    let target_index: Vec<usize> = series_index.iter().map(|t| t + h).collect();
    Ok(SupervisedSet {
        inputs: states.states.rows(0, n).into_owned(),
        targets: target_index.iter().map(|&i| targets.values[i]).collect(),
        series_index,
        target_index,
    })
}
