//! Monte Carlo dropout: fresh Bernoulli masks at inference turn a
//! dropout-trained readout into a sampler.

use crate::forecast::{EnsembleForecast, EnsembleSource, ForecastError};
use crate::readout::{check_keep_prob, sample_batch_masks, Mlp, ReadoutError};
use crate::rng::substream;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DropoutError {
    #[error("need at least one sample")]
    NoSamples,
    #[error("MC-dropout needs a single-output readout, got {0} outputs")]
    Outputs(usize),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// `n_samples` masked forward passes per state. Sample `m` draws its masks
/// from substream `m` of `seed`, so results do not depend on evaluation order.
pub fn predict_mc_dropout(
    mlp: &Mlp,
    states: &DMatrix<f64>,
    keep_prob: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EnsembleForecast, DropoutError> {
    check_keep_prob(keep_prob)?;
    if n_samples == 0 {
        return Err(DropoutError::NoSamples);
    }
    if mlp.spec.output_width() != 1 {
        return Err(DropoutError::Outputs(mlp.spec.output_width()));
    }
    let t = states.nrows();
    let mut values = vec![0.0; t * n_samples];
    for m in 0..n_samples {
        let mut rng = substream(seed, m as u64);
        let masks = sample_batch_masks(&mlp.spec, keep_prob, t, &mut rng)?;
        let out = mlp.forward_batch(states, Some(&masks))?;
        for (i, v) in out.column(0).iter().enumerate() {
            values[i * n_samples + m] = *v;
        }
    }
    Ok(EnsembleForecast::new(n_samples, values, EnsembleSource::Dropout)?)
}
