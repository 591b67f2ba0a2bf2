use super::{Chain, HmcError, LogDensity};
use crate::forecast::{EnsembleForecast, EnsembleSource};
use crate::prior::{half_cauchy_log_density, logit_to_interval, sigmoid};
use crate::rng::substream;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

/// Upper bound of the uniform prior on the noise standard deviation.
pub const SIGMA_UPPER: f64 = 10.0;

/// Horseshoe linear regression `y = X beta + N(0, sigma^2)` with
/// `beta_i ~ N(0, lambda_i^2 tau^2)`, `lambda_i, tau ~ C+(0, 1)` and
/// `sigma ~ Unif(0, 10)`.
///
/// Sampled non-centered: `beta_i = z_i lambda_i tau` with `z_i ~ N(0, 1)`,
/// which removes the funnel between small scales and their coefficients.
/// Unconstrained layout: `(z, log lambda, log tau, logit(sigma / 10))`.
#[derive(Debug, Clone)]
pub struct SsvsTarget {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

/// A point in the constrained parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct SsvsDraw {
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub tau: f64,
    pub sigma: f64,
}

impl SsvsTarget {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self, HmcError> {
        if x.nrows() != y.len() {
            return Err(HmcError::Shape { what: "targets", expected: x.nrows(), got: y.len() });
        }
        Ok(Self { x, y: DVector::from_vec(y) })
    }

    /// Prior-only target over `p` coefficients.
    pub fn prior_only(p: usize) -> Self {
        Self { x: DMatrix::zeros(0, p), y: DVector::zeros(0) }
    }

    pub fn n_coefficients(&self) -> usize {
        self.x.ncols()
    }

    pub fn constrain(&self, q: &[f64]) -> SsvsDraw {
        let p = self.n_coefficients();
        let lambda: Vec<f64> = q[p..2 * p].iter().map(|v| v.exp()).collect();
        let tau = q[2 * p].exp();
        SsvsDraw {
            beta: q[..p].iter().zip(&lambda).map(|(z, l)| z * l * tau).collect(),
            lambda,
            tau,
            sigma: logit_to_interval(q[2 * p + 1], 0.0, SIGMA_UPPER).0,
        }
    }

    pub fn unconstrain(&self, draw: &SsvsDraw) -> Vec<f64> {
        let mut q: Vec<f64> = draw.beta.iter().zip(&draw.lambda).map(|(b, l)| b / (l * draw.tau)).collect();
        q.extend(draw.lambda.iter().map(|l| l.ln()));
        q.push(draw.tau.ln());
        let s = draw.sigma / SIGMA_UPPER;
        q.push((s / (1.0 - s)).ln());
        q
    }

    /// Ridge estimate of `beta` with `sigma` from its residuals, and
    /// `lambda = tau = 1`. Starting at `beta = 0` leaves `sigma` near its
    /// upper bound, where the logistic transform is flat and chains stall.
    pub fn default_init(&self) -> Vec<f64> {
        let p = self.n_coefficients();
        let n = self.y.len();
        let (beta, sigma) = if n == 0 || p == 0 {
            (vec![0.0; p], 1.0)
        } else {
            let gram = self.x.tr_mul(&self.x) + DMatrix::identity(p, p);
            let beta = gram.cholesky().expect("ridge system is positive definite").solve(&self.x.tr_mul(&self.y));
            let rms = ((&self.y - &self.x * &beta).norm_squared() / n as f64).sqrt();
            (beta.as_slice().to_vec(), rms.clamp(1e-3, 0.5 * SIGMA_UPPER))
        };
        self.unconstrain(&SsvsDraw { beta, lambda: vec![1.0; p], tau: 1.0, sigma })
    }
}

impl LogDensity for SsvsTarget {
    fn dim(&self) -> usize {
        2 * self.n_coefficients() + 2
    }

    fn log_density_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.n_coefficients();
        let n = self.y.len() as f64;
        let log_tau = q[2 * p];
        let tau = log_tau.exp();
        let lambda: Vec<f64> = q[p..2 * p].iter().map(|v| v.exp()).collect();
        let beta = DVector::from_fn(p, |i, _| q[i] * lambda[i] * tau);
        let u = q[2 * p + 1];
        let (sigma, sigma_log_jac) = logit_to_interval(u, 0.0, SIGMA_UPPER);
        let s = sigmoid(u);

        let resid = &self.y - &self.x * &beta;
        let sse = resid.norm_squared();
        let var = sigma * sigma;
        let mut value = -0.5 * n * (2.0 * PI * var).ln() - 0.5 * sse / var;
        let g_beta = self.x.tr_mul(&resid) / var;

        let mut d_log_tau = 0.0;
        for i in 0..p {
            let z = q[i];
            let l2 = lambda[i] * lambda[i];
            value += -0.5 * (2.0 * PI).ln() - 0.5 * z * z;
            value += half_cauchy_log_density(lambda[i]) + q[p + i];
            let pull = g_beta[i] * beta[i];
            grad[i] = g_beta[i] * lambda[i] * tau - z;
            grad[p + i] = pull - 2.0 * l2 / (1.0 + l2) + 1.0;
            d_log_tau += pull;
        }
        let t2 = tau * tau;
        value += half_cauchy_log_density(tau) + log_tau;
        grad[2 * p] = d_log_tau - 2.0 * t2 / (1.0 + t2) + 1.0;

        value += sigma_log_jac - SIGMA_UPPER.ln();
        let d_sigma = -n / sigma + sse / (var * sigma);
        grad[2 * p + 1] = d_sigma * sigma * (1.0 - s) + (1.0 - 2.0 * s);
        value
    }
}

/// Posterior-predictive ensemble `s^T beta + N(0, sigma^2)` from evenly
/// spaced kept draws. Draw `m` uses substream `m` of `seed`.
pub fn posterior_predict_ssvs(
    chain: &Chain,
    target: &SsvsTarget,
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
    let p = target.n_coefficients();
    if states.ncols() != p {
        return Err(HmcError::Shape { what: "state width", expected: p, got: states.ncols() });
    }
    let t = states.nrows();
    let mut values = vec![0.0; t * n_samples];
    for m in 0..n_samples {
        let row = (m * kept) / n_samples;
        let q: Vec<f64> = chain.samples.row(row).iter().copied().collect();
        let draw = target.constrain(&q);
        let mean = states * DVector::from_vec(draw.beta);
        let mut rng = substream(seed, m as u64);
        for i in 0..t {
            let e: f64 = StandardNormal.sample(&mut rng);
            values[i * n_samples + m] = mean[i] + draw.sigma * e;
        }
    }
    Ok(EnsembleForecast::new(n_samples, values, EnsembleSource::Hmc)?)
}
