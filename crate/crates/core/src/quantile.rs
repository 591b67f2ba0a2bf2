//! Multi-head quantile regression readout trained on the pinball loss.

use crate::forecast::{ForecastError, QuantileForecast, QuantileLevels};
use crate::readout::{pinball, train_deterministic, Loss, Mlp, MlpSpec, OptimizerConfig, ReadoutError};
use crate::rng::{derive_seed, seeded};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantileError {
    #[error("quantile level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("network has {got} outputs but {expected} quantile levels were requested")]
    Heads { expected: usize, got: usize },
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// The check loss `rho_tau(r)`.
pub fn pinball_loss(r: f64, tau: f64) -> Result<f64, QuantileError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QuantileError::Level(tau));
    }
    Ok(pinball(r, tau))
}

#[derive(Debug, Clone)]
pub struct QrModel {
    pub mlp: Mlp,
    pub levels: QuantileLevels,
    pub loss_trace: Vec<f64>,
}

/// Trains one shared network whose head `k` estimates quantile `levels[k]`.
/// Weights are initialized from a seed derived from `opt.seed`.
pub fn train_qr(
    spec: MlpSpec,
    inputs: &DMatrix<f64>,
    targets: &[f64],
    levels: &QuantileLevels,
    opt: &OptimizerConfig,
) -> Result<QrModel, QuantileError> {
    if spec.output_width() != levels.len() {
        return Err(QuantileError::Heads { expected: levels.len(), got: spec.output_width() });
    }
    let init = Mlp::init(spec, &mut seeded(derive_seed(opt.seed, 0)));
    let loss = Loss::Pinball(levels.as_slice().to_vec());
    let out = train_deterministic(init, inputs, targets, &loss, opt, None)?;
    Ok(QrModel { mlp: out.mlp, levels: levels.clone(), loss_trace: out.loss_trace })
}

/// Raw head outputs, sorted per step so quantiles never cross.
pub fn predict_quantiles(model: &QrModel, states: &DMatrix<f64>) -> Result<QuantileForecast, QuantileError> {
    let out = model.mlp.forward_batch(states, None)?;
    let values: Vec<f64> = out.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    Ok(QuantileForecast::from_unsorted(model.levels.clone(), values)?)
}
