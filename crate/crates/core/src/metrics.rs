//! Quantile extraction, calibration, recalibration and scoring.

use crate::data::SplitRole;
use crate::forecast::{EnsembleForecast, ForecastError, PredictiveDistribution, QuantileForecast, QuantileLevels};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Interval endpoints for the 95% interval metrics.
pub const LOWER_95: f64 = 0.025;
pub const UPPER_95: f64 = 0.975;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 ensemble members, got {0}")]
    TooFewSamples(usize),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("negative calibration weight {0}")]
    NegativeWeight(f64),
    #[error("quantiles cross at step {0}")]
    Crossing(usize),
    #[error("quantile-regression forecasts are not recalibrated")]
    QuantileOnly,
    #[error("calibration map was fitted on the {0:?} split")]
    Leakage(SplitRole),
    #[error("need at least one time step")]
    Empty,
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// Empirical `tau`-quantile of sorted data, interpolating linearly between
/// order statistics at position `(M - 1) tau`.
pub fn quantile_of_sorted(sorted: &[f64], tau: f64) -> f64 {
    let m = sorted.len();
    let h = (m - 1) as f64 * tau.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(m - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn extract_at(ensemble: &EnsembleForecast, taus: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if ensemble.n_samples() < 2 {
        return Err(MetricsError::TooFewSamples(ensemble.n_samples()));
    }
    let mut out = Vec::with_capacity(ensemble.n_steps() * taus.len());
    let mut buf = Vec::with_capacity(ensemble.n_samples());
    for step in ensemble.steps() {
        buf.clear();
        buf.extend_from_slice(step);
        buf.sort_by(f64::total_cmp);
        out.extend(taus.iter().map(|&t| quantile_of_sorted(&buf, t)));
    }
    Ok(out)
}

/// Per-step empirical quantiles of an ensemble.
pub fn extract_quantiles(ensemble: &EnsembleForecast, levels: &QuantileLevels) -> Result<QuantileForecast, MetricsError> {
    let values = extract_at(ensemble, levels.as_slice())?;
    Ok(QuantileForecast::new(levels.clone(), values)?)
}

/// Nominal levels against observed frequencies `|{y_t <= q_t}| / T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub observed: Vec<f64>,
    pub n_steps: usize,
}

fn check_aligned(forecast: &QuantileForecast, truths: &[f64]) -> Result<(), MetricsError> {
    if truths.is_empty() {
        return Err(MetricsError::Empty);
    }
    if forecast.n_steps() != truths.len() {
        return Err(MetricsError::Shape { what: "truths", expected: forecast.n_steps(), got: truths.len() });
    }
    Ok(())
}

pub fn calibration_curve(forecast: &QuantileForecast, truths: &[f64]) -> Result<CalibrationCurve, MetricsError> {
    check_aligned(forecast, truths)?;
    let k = forecast.levels().len();
    let mut counts = vec![0usize; k];
    for (q, &y) in forecast.steps().zip(truths) {
        for (c, &qv) in counts.iter_mut().zip(q) {
            *c += usize::from(y <= qv);
        }
    }
    let t = truths.len();
    Ok(CalibrationCurve {
        levels: forecast.levels().as_slice().to_vec(),
        observed: counts.iter().map(|&c| c as f64 / t as f64).collect(),
        n_steps: t,
    })
}

/// `sum_i w_i (tau_i - observed_i)^2`; `None` means unit weights.
pub fn calibration_error(curve: &CalibrationCurve, weights: Option<&[f64]>) -> Result<f64, MetricsError> {
    let k = curve.levels.len();
    if let Some(w) = weights {
        if w.len() != k {
            return Err(MetricsError::Shape { what: "weights", expected: k, got: w.len() });
        }
        if let Some(&bad) = w.iter().find(|&&v| v < 0.0) {
            return Err(MetricsError::NegativeWeight(bad));
        }
    }
    Ok((0..k)
        .map(|i| weights.map_or(1.0, |w| w[i]) * (curve.levels[i] - curve.observed[i]).powi(2))
        .sum())
}

/// Pool-adjacent-violators fit of non-decreasing values to `y` (equal weights).
pub fn isotonic_fit(y: &[f64]) -> Vec<f64> {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 <= s1 / c1 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s0 + s1, c0 + c1);
        }
    }
    blocks.iter().flat_map(|&(s, c)| std::iter::repeat_n(s / c as f64, c)).collect()
}

/// Monotone piecewise-linear map from nominal level to observed frequency,
/// pinned at `(0, 0)` and `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub knots_x: Vec<f64>,
    pub knots_y: Vec<f64>,
    pub fitted_on: SplitRole,
}

/// Isotonic regression of observed frequencies on nominal levels.
pub fn fit_recalibrator(curve: &CalibrationCurve, fitted_on: SplitRole) -> Result<CalibrationMap, MetricsError> {
    if fitted_on == SplitRole::Test {
        return Err(MetricsError::Leakage(fitted_on));
    }
    let fitted = isotonic_fit(&curve.observed);
    let mut knots_x = vec![0.0];
    let mut knots_y = vec![0.0];
    for (&x, &y) in curve.levels.iter().zip(&fitted) {
        if x > 0.0 && x < 1.0 {
            knots_x.push(x);
            knots_y.push(y.clamp(0.0, 1.0));
        }
    }
    knots_x.push(1.0);
    knots_y.push(1.0);
    Ok(CalibrationMap { knots_x, knots_y, fitted_on })
}

impl CalibrationMap {
    pub fn identity() -> Self {
        Self { knots_x: vec![0.0, 1.0], knots_y: vec![0.0, 1.0], fitted_on: SplitRole::Calibration }
    }

    /// `mu(x)` by linear interpolation between knots.
    pub fn apply(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        let j = self.knots_x.partition_point(|&k| k <= x).clamp(1, self.knots_x.len() - 1);
        let (x0, x1) = (self.knots_x[j - 1], self.knots_x[j]);
        let (y0, y1) = (self.knots_y[j - 1], self.knots_y[j]);
        if x1 == x0 {
            y1
        } else {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }

    /// Smallest `x` with `mu(x) >= alpha`.
    pub fn inverse(&self, alpha: f64) -> f64 {
        let alpha = alpha.clamp(0.0, 1.0);
        for j in 1..self.knots_x.len() {
            let (y0, y1) = (self.knots_y[j - 1], self.knots_y[j]);
            if y1 >= alpha {
                let (x0, x1) = (self.knots_x[j - 1], self.knots_x[j]);
                if y0 >= alpha {
                    return x0;
                }
                return x0 + (x1 - x0) * (alpha - y0) / (y1 - y0);
            }
        }
        1.0
    }
}

/// Quantiles at the requested levels after recalibration: level `alpha` is
/// read from the ensemble at nominal level `mu^-1(alpha)`.
pub fn recalibrate(
    map: &CalibrationMap,
    forecast: &PredictiveDistribution,
    levels: &QuantileLevels,
) -> Result<QuantileForecast, MetricsError> {
    if map.fitted_on == SplitRole::Test {
        return Err(MetricsError::Leakage(map.fitted_on));
    }
    let PredictiveDistribution::Ensemble(ensemble) = forecast else {
        return Err(MetricsError::QuantileOnly);
    };
    let taus: Vec<f64> = levels.as_slice().iter().map(|&a| map.inverse(a)).collect();
    let values = extract_at(ensemble, &taus)?;
    Ok(QuantileForecast::new(levels.clone(), values)?)
}

/// CRPS of a step CDF built from quantiles: `F = 0` below the first quantile,
/// `tau_i` between quantiles `i` and `i + 1`, and `1` above the last.
pub fn crps(quantiles: &[f64], levels: &[f64], y: f64) -> Result<f64, MetricsError> {
    if quantiles.len() != levels.len() {
        return Err(MetricsError::Shape { what: "levels", expected: quantiles.len(), got: levels.len() });
    }
    if quantiles.is_empty() {
        return Err(MetricsError::Empty);
    }
    if quantiles.windows(2).any(|w| w[1] < w[0]) {
        return Err(MetricsError::Crossing(0));
    }
    let k = quantiles.len();
    let mut total = (quantiles[0] - y).max(0.0) + (y - quantiles[k - 1]).max(0.0);
    for i in 0..k - 1 {
        let (a, b, c) = (quantiles[i], quantiles[i + 1], levels[i]);
        let below = (b.min(y) - a).max(0.0);
        let above = (b - a.max(y)).max(0.0);
        total += c * c * below + (1.0 - c) * (1.0 - c) * above;
    }
    Ok(total)
}

/// Mean CRPS over all steps.
pub fn mcrps(forecast: &QuantileForecast, truths: &[f64]) -> Result<f64, MetricsError> {
    check_aligned(forecast, truths)?;
    let levels = forecast.levels().as_slice();
    let mut sum = 0.0;
    for (t, (q, &y)) in forecast.steps().zip(truths).enumerate() {
        sum += crps(q, levels, y).map_err(|e| match e {
            MetricsError::Crossing(_) => MetricsError::Crossing(t),
            other => other,
        })?;
    }
    Ok(sum / truths.len() as f64)
}

/// Mean width of `[q_lower, q_upper]` and the fraction of truths inside it.
pub fn interval_metrics_at(
    forecast: &QuantileForecast,
    truths: &[f64],
    lower: f64,
    upper: f64,
) -> Result<(f64, f64), MetricsError> {
    check_aligned(forecast, truths)?;
    let lo = forecast.at_level(lower)?;
    let hi = forecast.at_level(upper)?;
    let t = truths.len() as f64;
    let width = lo.iter().zip(&hi).map(|(a, b)| b - a).sum::<f64>() / t;
    let inside = truths.iter().zip(lo.iter().zip(&hi)).filter(|(y, (a, b))| *y >= *a && *y <= *b).count();
    Ok((width, inside as f64 / t))
}

/// Width and coverage of the central 95% interval.
pub fn interval_metrics(forecast: &QuantileForecast, truths: &[f64]) -> Result<(f64, f64), MetricsError> {
    interval_metrics_at(forecast, truths, LOWER_95, UPPER_95)
}

/// Mean squared error of the median forecast.
pub fn mse_median(forecast: &QuantileForecast, truths: &[f64]) -> Result<f64, MetricsError> {
    check_aligned(forecast, truths)?;
    let med = forecast.at_level(0.5)?;
    Ok(med.iter().zip(truths).map(|(m, y)| (y - m).powi(2)).sum::<f64>() / truths.len() as f64)
}

/// Headline metrics of one forecast on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub cal: f64,
    pub width95: f64,
    pub coverage95: f64,
    pub mcrps: f64,
}

pub fn evaluate(forecast: &QuantileForecast, truths: &[f64]) -> Result<MetricsReport, MetricsError> {
    let curve = calibration_curve(forecast, truths)?;
    let (width95, coverage95) = interval_metrics(forecast, truths)?;
    Ok(MetricsReport {
        mse: mse_median(forecast, truths)?,
        cal: calibration_error(&curve, None)?,
        width95,
        coverage95,
        mcrps: mcrps(forecast, truths)?,
    })
}

/// Writes `tau,observed_before,observed_after` rows; `after` may be absent.
pub fn write_calibration_csv(
    path: &Path,
    before: &CalibrationCurve,
    after: Option<&CalibrationCurve>,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "tau,observed_before,observed_after")?;
    for (i, (&tau, &b)) in before.levels.iter().zip(&before.observed).enumerate() {
        match after {
            Some(a) => writeln!(f, "{tau},{b},{}", a.observed[i])?,
            None => writeln!(f, "{tau},{b},")?,
        }
    }
    f.flush()
}
