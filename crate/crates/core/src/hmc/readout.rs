use super::{Chain, HmcError, LogDensity};
use crate::forecast::{EnsembleForecast, EnsembleSource};
use crate::prior::{interval_to_logit, logit_to_interval, sigmoid, WeightPrior};
use crate::readout::{backward, forward_batch, forward_cached, MlpSpec};
use crate::rng::substream;
use crate::variational::NoiseModel;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

/// Posterior over readout weights (and, when learned, the noise variance)
/// on an unconstrained scale.
///
/// Layout: one coordinate per readout parameter, then one for the noise
/// variance if it is learned. Uniform weight priors and the noise variance
/// use a logistic map onto their interval.
#[derive(Debug, Clone)]
pub struct ReadoutTarget {
    pub readout: MlpSpec,
    pub prior: WeightPrior,
    pub noise: NoiseModel,
    inputs: DMatrix<f64>,
    targets: Vec<f64>,
}

impl ReadoutTarget {
    pub fn new(
        readout: MlpSpec,
        prior: WeightPrior,
        noise: NoiseModel,
        inputs: DMatrix<f64>,
        targets: Vec<f64>,
    ) -> Result<Self, HmcError> {
        prior.validate().map_err(HmcError::Config)?;
        if prior == WeightPrior::Horseshoe {
            return Err(HmcError::Config("the horseshoe prior needs the sparse linear target".into()));
        }
        if readout.output_width() != 1 {
            return Err(HmcError::Shape { what: "readout outputs", expected: 1, got: readout.output_width() });
        }
        if inputs.ncols() != readout.input_width() {
            return Err(HmcError::Shape { what: "input width", expected: readout.input_width(), got: inputs.ncols() });
        }
        if targets.len() != inputs.nrows() {
            return Err(HmcError::Shape { what: "targets", expected: inputs.nrows(), got: targets.len() });
        }
        match noise {
            NoiseModel::Fixed(v) if !(v > 0.0) => return Err(HmcError::Config(format!("noise variance {v}"))),
            NoiseModel::Learned(p) if !(p.upper > 0.0) => return Err(HmcError::Config(format!("noise bound {}", p.upper))),
            _ => {}
        }
        Ok(Self { readout, prior, noise, inputs, targets })
    }

    pub fn n_weights(&self) -> usize {
        self.readout.n_params()
    }

    fn learns_noise(&self) -> bool {
        matches!(self.noise, NoiseModel::Learned(_))
    }

    /// Readout parameters and noise variance at an unconstrained point.
    pub fn constrain(&self, q: &[f64]) -> (Vec<f64>, f64) {
        let nw = self.n_weights();
        let weights = match self.prior {
            WeightPrior::Uniform { low, high } => q[..nw].iter().map(|&u| logit_to_interval(u, low, high).0).collect(),
            _ => q[..nw].to_vec(),
        };
        let noise = match self.noise {
            NoiseModel::Fixed(v) => v,
            NoiseModel::Learned(p) => logit_to_interval(q[nw], 0.0, p.upper).0,
        };
        (weights, noise)
    }

    /// Inverse of [`constrain`](Self::constrain). Values must lie strictly
    /// inside their supports.
    pub fn unconstrain(&self, weights: &[f64], noise: f64) -> Vec<f64> {
        let mut q: Vec<f64> = match self.prior {
            WeightPrior::Uniform { low, high } => weights.iter().map(|&w| interval_to_logit(w, low, high)).collect(),
            _ => weights.to_vec(),
        };
        if let NoiseModel::Learned(p) = self.noise {
            q.push(interval_to_logit(noise, 0.0, p.upper));
        }
        q
    }

    /// A starting point: prior-centred weights scaled down and the noise
    /// variance at `noise` (clamped into its support).
    pub fn default_init(&self, weights: &[f64], noise: f64) -> Vec<f64> {
        let w: Vec<f64> = match self.prior {
            WeightPrior::Uniform { low, high } => {
                let m = 1e-3 * (high - low);
                weights.iter().map(|v| v.clamp(low + m, high - m)).collect()
            }
            _ => weights.to_vec(),
        };
        let noise = match self.noise {
            NoiseModel::Learned(p) => noise.clamp(1e-3 * p.upper, 0.999 * p.upper),
            NoiseModel::Fixed(v) => v,
        };
        self.unconstrain(&w, noise)
    }
}

impl LogDensity for ReadoutTarget {
    fn dim(&self) -> usize {
        self.n_weights() + usize::from(self.learns_noise())
    }

    fn log_density_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let nw = self.n_weights();
        let (weights, noise) = self.constrain(q);
        let cache = match forward_cached(&self.readout, &weights, &self.inputs, None) {
            Ok(c) => c,
            Err(_) => {
                grad.fill(f64::NAN);
                return f64::NAN;
            }
        };
        let t = self.targets.len() as f64;
        let resid: Vec<f64> = self.targets.iter().zip(cache.output.iter()).map(|(y, g)| y - g).collect();
        let sse: f64 = resid.iter().map(|e| e * e).sum();
        let mut value = -0.5 * t * (2.0 * PI * noise).ln() - 0.5 * sse / noise;
        let d_out = DMatrix::from_iterator(resid.len(), 1, resid.iter().map(|e| e / noise));
        let g_w = backward(&self.readout, &weights, &cache, &d_out);
        match self.prior {
            WeightPrior::Normal { std } => {
                let var = std * std;
                value += -0.5 * nw as f64 * (2.0 * PI * var).ln();
                for i in 0..nw {
                    value -= 0.5 * weights[i] * weights[i] / var;
                    grad[i] = g_w[i] - weights[i] / var;
                }
            }
            WeightPrior::Uniform { low, high } => {
                // density 1/(high-low) times the logistic Jacobian
                value -= nw as f64 * (high - low).ln();
                for i in 0..nw {
                    let (_, log_jac) = logit_to_interval(q[i], low, high);
                    let s = sigmoid(q[i]);
                    value += log_jac;
                    grad[i] = g_w[i] * (high - low) * s * (1.0 - s) + (1.0 - 2.0 * s);
                }
            }
            WeightPrior::Horseshoe => unreachable!("rejected at construction"),
        }
        if let NoiseModel::Learned(p) = self.noise {
            let u = q[nw];
            let (_, log_jac) = logit_to_interval(u, 0.0, p.upper);
            let s = sigmoid(u);
            value += log_jac - p.upper.ln();
            let d_noise = -0.5 * t / noise + 0.5 * sse / (noise * noise);
            grad[nw] = d_noise * noise * (1.0 - s) + (1.0 - 2.0 * s);
        }
        value
    }
}

/// Posterior-predictive ensemble from a chain: `n_samples` kept draws spaced
/// evenly along the chain, each evaluated on `states` with `N(0, Sigma)`
/// observation noise added. Draw `m` uses substream `m` of `seed`.
pub fn posterior_predict_hmc(
    chain: &Chain,
    target: &ReadoutTarget,
    states: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<EnsembleForecast, HmcError> {
    let kept = chain.n_samples();
    if kept == 0 || n_samples == 0 {
        return Err(HmcError::EmptyChain);
    }
    if chain.dim() != target.dim() {
        return Err(HmcError::Shape { what: "chain dimension", expected: target.dim(), got: chain.dim() });
    }
    let t = states.nrows();
    let mut values = vec![0.0; t * n_samples];
    for m in 0..n_samples {
        let row = (m * kept) / n_samples;
        let q: Vec<f64> = chain.samples.row(row).iter().copied().collect();
        let (weights, noise) = target.constrain(&q);
        let out = forward_batch(&target.readout, &weights, states, None)?;
        let sd = noise.sqrt();
        let mut rng = substream(seed, m as u64);
        for i in 0..t {
            let e: f64 = StandardNormal.sample(&mut rng);
            values[i * n_samples + m] = out[(i, 0)] + sd * e;
        }
    }
    Ok(EnsembleForecast::new(n_samples, values, EnsembleSource::Hmc)?)
}
