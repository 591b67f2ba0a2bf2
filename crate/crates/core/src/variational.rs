//! Variational inference over the flat readout parameters with a
//! low-rank-plus-diagonal Gaussian family and reparameterized ELBO
//! gradients.

use crate::forecast::{EnsembleForecast, EnsembleSource, ForecastError};
use crate::prior::{normal_log_density, softplus, softplus_inv, sigmoid, NoisePrior, WeightPrior};
use crate::readout::{backward, forward_cached, forward_batch, Mlp, MlpSpec, Optimizer, ReadoutError};
use crate::rng::{derive_seed, seeded, substream, SimRng};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Lower bound added to the softplus diagonal.
pub const MIN_DIAG: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum VariationalError {
    #[error("variational mean leaves the uniform prior support ({low}, {high}) at parameter {index} (value {value})")]
    OutsideSupport { index: usize, value: f64, low: f64, high: f64 },
    #[error("the horseshoe prior is only available for the sparse linear readout")]
    UnsupportedPrior,
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("ELBO became non-finite at step {0}")]
    Diverged(usize),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("need at least one {0}")]
    Empty(&'static str),
    #[error("covariance factor is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// `N(mean, C C^T + Psi)` with `Psi = diag(softplus(diag_raw) + MIN_DIAG)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGaussian {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
    pub diag_raw: DVector<f64>,
}

/// Standard-normal inputs of one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// `phi ~ N(0, I_r)`.
    pub latent: DVector<f64>,
    /// `eta ~ N(0, I_D)`, scaled by `sqrt(Psi)`.
    pub noise: DVector<f64>,
}

/// Gradient with respect to the variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QGrad {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
    pub diag_raw: DVector<f64>,
}

impl QGrad {
    fn zeros(q: &LowRankGaussian) -> Self {
        Self {
            mean: DVector::zeros(q.dim()),
            factor: DMatrix::zeros(q.dim(), q.rank()),
            diag_raw: DVector::zeros(q.dim()),
        }
    }

    fn add_scaled(&mut self, other: &QGrad, s: f64) {
        self.mean.axpy(s, &other.mean, 1.0);
        self.factor += &other.factor * s;
        self.diag_raw.axpy(s, &other.diag_raw, 1.0);
    }
}

/// Pieces of the covariance that need the rank-r inversion identities.
struct Woodbury {
    psi: DVector<f64>,
    /// `Psi^-1 C M^-1`, which equals `Sigma^-1 C`.
    sigma_inv_c: DMatrix<f64>,
    /// `diag(Sigma^-1)`.
    sigma_inv_diag: DVector<f64>,
    log_det: f64,
}

impl LowRankGaussian {
    pub fn new(mean: DVector<f64>, factor: DMatrix<f64>, diag_raw: DVector<f64>) -> Result<Self, VariationalError> {
        let d = mean.len();
        if factor.nrows() != d {
            return Err(VariationalError::Shape { what: "factor rows", expected: d, got: factor.nrows() });
        }
        if diag_raw.len() != d {
            return Err(VariationalError::Shape { what: "diagonal", expected: d, got: diag_raw.len() });
        }
        Ok(Self { mean, factor, diag_raw })
    }

    /// Mean-field (C = 0) Gaussian with the given diagonal variances.
    pub fn diagonal(mean: DVector<f64>, variances: &[f64], rank: usize) -> Self {
        let d = mean.len();
        let diag_raw = DVector::from_iterator(d, variances.iter().map(|&v| softplus_inv((v - MIN_DIAG).max(1e-300))));
        Self { mean, factor: DMatrix::zeros(d, rank), diag_raw }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn psi(&self) -> DVector<f64> {
        self.diag_raw.map(|d| softplus(d) + MIN_DIAG)
    }

    /// Dense `C C^T + Psi`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut cov = &self.factor * self.factor.transpose();
        for (i, p) in self.psi().iter().enumerate() {
            cov[(i, i)] += p;
        }
        cov
    }

    pub fn standard_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let latent = DVector::from_fn(self.rank(), |_, _| StandardNormal.sample(rng));
        let noise = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        Draw { latent, noise }
    }

    /// `mean + C phi + sqrt(Psi) eta`.
    pub fn transform(&self, draw: &Draw) -> DVector<f64> {
        let psi = self.psi();
        let mut r = &self.mean + &self.factor * &draw.latent;
        for i in 0..self.dim() {
            r[i] += psi[i].sqrt() * draw.noise[i];
        }
        r
    }

    /// One parameter sample `R = mean + C phi + eps`, `eps ~ N(0, Psi)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let draw = self.standard_draw(rng);
        self.transform(&draw)
    }

    /// Chain rule from `dF/dR` at `R = transform(draw)` to the variational
    /// parameters.
    pub fn pullback(&self, draw: &Draw, grad_r: &DVector<f64>) -> QGrad {
        let mut factor = DMatrix::zeros(self.dim(), self.rank());
        factor.ger(1.0, grad_r, &draw.latent, 0.0);
        let diag_raw = DVector::from_fn(self.dim(), |i, _| {
            let psi = softplus(self.diag_raw[i]) + MIN_DIAG;
            grad_r[i] * draw.noise[i] * 0.5 / psi.sqrt() * sigmoid(self.diag_raw[i])
        });
        QGrad { mean: grad_r.clone(), factor, diag_raw }
    }

    fn woodbury(&self) -> Result<Woodbury, VariationalError> {
        let psi = self.psi();
        let r = self.rank();
        let psi_inv_c = DMatrix::from_fn(self.dim(), r, |i, j| self.factor[(i, j)] / psi[i]);
        let mut inner = self.factor.transpose() * &psi_inv_c;
        for k in 0..r {
            inner[(k, k)] += 1.0;
        }
        let chol = Cholesky::new(inner).ok_or(VariationalError::NotPositiveDefinite)?;
        let log_det_inner = 2.0 * chol.l_dirty().diagonal().iter().take(r).map(|v| v.ln()).sum::<f64>();
        let inner_inv = chol.inverse();
        let sigma_inv_c = &psi_inv_c * &inner_inv;
        // diag(Sigma^-1) = 1/psi - diag(Psi^-1 C M^-1 C^T Psi^-1)
        let sigma_inv_diag = DVector::from_fn(self.dim(), |i, _| {
            let quad: f64 = (0..r).map(|k| sigma_inv_c[(i, k)] * psi_inv_c[(i, k)] * psi[i]).sum::<f64>();
            (1.0 - quad) / psi[i]
        });
        let log_det = psi.iter().map(|p| p.ln()).sum::<f64>() + log_det_inner;
        Ok(Woodbury { psi, sigma_inv_c, sigma_inv_diag, log_det })
    }

    /// `log det (C C^T + Psi)` via the matrix determinant lemma.
    pub fn log_det_cov(&self) -> Result<f64, VariationalError> {
        Ok(self.woodbury()?.log_det)
    }

    /// Differential entropy and its gradient.
    pub fn entropy(&self) -> Result<(f64, QGrad), VariationalError> {
        let w = self.woodbury()?;
        let d = self.dim() as f64;
        let value = 0.5 * d * (1.0 + (2.0 * PI).ln()) + 0.5 * w.log_det;
        let factor = w.sigma_inv_c.clone();
        let diag_raw = DVector::from_fn(self.dim(), |i, _| 0.5 * w.sigma_inv_diag[i] * sigmoid(self.diag_raw[i]));
        Ok((value, QGrad { mean: DVector::zeros(self.dim()), factor, diag_raw }))
    }

    /// Closed-form `KL(q || N(0, std^2 I))` and its gradient.
    pub fn kl_to_isotropic(&self, std: f64) -> Result<(f64, QGrad), VariationalError> {
        let w = self.woodbury()?;
        let s2 = std * std;
        let d = self.dim() as f64;
        let trace = self.factor.norm_squared() + w.psi.sum();
        let value = 0.5 * ((trace + self.mean.norm_squared()) / s2 - d + d * s2.ln() - w.log_det);
        let mean = &self.mean / s2;
        let factor = &self.factor / s2 - &w.sigma_inv_c;
        let diag_raw =
            DVector::from_fn(self.dim(), |i, _| 0.5 * (1.0 / s2 - w.sigma_inv_diag[i]) * sigmoid(self.diag_raw[i]));
        Ok((value, QGrad { mean, factor, diag_raw }))
    }
}

/// Observation-noise variance: fixed, or a learned point estimate under a
/// `Unif(0, upper)` prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Fixed(f64),
    Learned(NoisePrior),
}

/// Gaussian likelihood `y ~ N(g(s; R), Sigma)` with a readout and a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodModel {
    pub readout: MlpSpec,
    pub prior: WeightPrior,
    pub noise: NoiseModel,
}

impl LikelihoodModel {
    pub fn validate(&self) -> Result<(), VariationalError> {
        if self.prior == WeightPrior::Horseshoe {
            return Err(VariationalError::UnsupportedPrior);
        }
        self.prior.validate().map_err(VariationalError::Prior)?;
        if self.readout.output_width() != 1 {
            return Err(VariationalError::Shape { what: "readout outputs", expected: 1, got: self.readout.output_width() });
        }
        match self.noise {
            NoiseModel::Fixed(v) if !(v > 0.0) => Err(VariationalError::Prior(format!("noise variance {v}"))),
            NoiseModel::Learned(p) if !(p.upper > 0.0) => Err(VariationalError::Prior(format!("noise bound {}", p.upper))),
            _ => Ok(()),
        }
    }
}

/// Monte Carlo ELBO estimate with gradients.
#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub value: f64,
    pub expected_log_lik: f64,
    /// `KL(q || prior)` for Gaussian priors; `-H(q) - log p(R)` for uniform priors.
    pub kl: f64,
    pub grad: QGrad,
    pub grad_log_noise: f64,
}

fn check_support(q: &LowRankGaussian, prior: &WeightPrior) -> Result<(), VariationalError> {
    if let WeightPrior::Uniform { low, high } = *prior {
        if let Some(index) = q.mean.iter().position(|&m| !(m > low && m < high)) {
            return Err(VariationalError::OutsideSupport { index, value: q.mean[index], low, high });
        }
    }
    Ok(())
}

/// Prior term of the ELBO (to be subtracted) and its gradient.
fn prior_term(q: &LowRankGaussian, prior: &WeightPrior) -> Result<(f64, QGrad), VariationalError> {
    match *prior {
        WeightPrior::Normal { std } => q.kl_to_isotropic(std),
        WeightPrior::Uniform { low, high } => {
            check_support(q, prior)?;
            let (h, mut g) = q.entropy()?;
            g.factor.neg_mut();
            g.diag_raw.neg_mut();
            Ok((-h + q.dim() as f64 * (high - low).ln(), g))
        }
        WeightPrior::Horseshoe => Err(VariationalError::UnsupportedPrior),
    }
}

/// ELBO at fixed standard-normal draws. Deterministic in its inputs, which
/// makes it usable for common-random-number finite differences.
pub fn elbo_at(
    q: &LowRankGaussian,
    log_noise: f64,
    model: &LikelihoodModel,
    inputs: &DMatrix<f64>,
    targets: &[f64],
    draws: &[Draw],
) -> Result<ElboEstimate, VariationalError> {
    if draws.is_empty() {
        return Err(VariationalError::Empty("draw"));
    }
    if q.dim() != model.readout.n_params() {
        return Err(VariationalError::Shape { what: "parameter dimension", expected: model.readout.n_params(), got: q.dim() });
    }
    if targets.len() != inputs.nrows() {
        return Err(VariationalError::Shape { what: "targets", expected: inputs.nrows(), got: targets.len() });
    }
    let (kl, kl_grad) = prior_term(q, &model.prior)?;
    let noise_var = log_noise.exp();
    let t = targets.len() as f64;
    let n = draws.len() as f64;
    let mut grad = QGrad::zeros(q);
    grad.add_scaled(&kl_grad, -1.0);
    let mut ll_total = 0.0;
    let mut grad_log_noise = 0.0;
    for draw in draws {
        let r = q.transform(draw);
        let cache = forward_cached(&model.readout, r.as_slice(), inputs, None)?;
        let resid: Vec<f64> = targets.iter().zip(cache.output.iter()).map(|(y, g)| y - g).collect();
        let sse: f64 = resid.iter().map(|e| e * e).sum();
        ll_total += -0.5 * t * (2.0 * PI * noise_var).ln() - 0.5 * sse / noise_var;
        grad_log_noise += -0.5 * t + 0.5 * sse / noise_var;
        let d_out = DMatrix::from_iterator(resid.len(), 1, resid.iter().map(|e| e / noise_var));
        let grad_r = DVector::from_vec(backward(&model.readout, r.as_slice(), &cache, &d_out));
        grad.add_scaled(&q.pullback(draw, &grad_r), 1.0 / n);
    }
    let expected_log_lik = ll_total / n;
    let grad_log_noise = match model.noise {
        NoiseModel::Fixed(_) => 0.0,
        NoiseModel::Learned(_) => grad_log_noise / n,
    };
    Ok(ElboEstimate { value: expected_log_lik - kl, expected_log_lik, kl, grad, grad_log_noise })
}

/// Reparameterized ELBO estimate from `n_mc` fresh draws.
pub fn elbo<R: Rng + ?Sized>(
    q: &LowRankGaussian,
    log_noise: f64,
    model: &LikelihoodModel,
    inputs: &DMatrix<f64>,
    targets: &[f64],
    n_mc: usize,
    rng: &mut R,
) -> Result<ElboEstimate, VariationalError> {
    if n_mc == 0 {
        return Err(VariationalError::Empty("Monte Carlo sample"));
    }
    let draws: Vec<Draw> = (0..n_mc).map(|_| q.standard_draw(rng)).collect();
    elbo_at(q, log_noise, model, inputs, targets, &draws)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViConfig {
    /// `None` uses `round(sqrt(D))`.
    pub rank: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self { rank: None, steps: 2000, learning_rate: 1e-2, n_mc: 1, seed: 0 }
    }
}

/// Result of [`fit_vi`].
#[derive(Debug, Clone)]
pub struct VariationalFit {
    pub q: LowRankGaussian,
    pub log_noise: f64,
    pub elbo_trace: Vec<f64>,
    /// Steps on which the mean was projected back into a uniform prior's
    /// support or the noise variance was clipped to its prior bound.
    pub clip_events: usize,
}

impl VariationalFit {
    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }
}

pub fn default_rank(dim: usize) -> usize {
    ((dim as f64).sqrt().round() as usize).clamp(1, dim)
}

/// Initial mean: Glorot-uniform weights, pushed inside a uniform prior's
/// support when there is one.
fn initial_mean(model: &LikelihoodModel, rng: &mut SimRng) -> DVector<f64> {
    let init = Mlp::init(model.readout.clone(), rng);
    let mut mean = DVector::from_vec(init.params);
    if let WeightPrior::Uniform { low, high } = model.prior {
        let w = high - low;
        mean.apply(|m| *m = (low + m.abs()).clamp(low + 1e-3 * w, high - 1e-3 * w));
    }
    mean
}

fn project(q: &mut LowRankGaussian, prior: &WeightPrior) -> bool {
    let WeightPrior::Uniform { low, high } = *prior else { return false };
    let margin = 1e-6 * (high - low);
    let mut moved = false;
    for m in q.mean.iter_mut() {
        let c = m.clamp(low + margin, high - margin);
        if c != *m {
            *m = c;
            moved = true;
        }
    }
    moved
}

/// Adam ascent on the ELBO. Starts from `C = 0`, `Psi = 1e-2 I`.
pub fn fit_vi(
    model: &LikelihoodModel,
    inputs: &DMatrix<f64>,
    targets: &[f64],
    cfg: &ViConfig,
) -> Result<VariationalFit, VariationalError> {
    model.validate()?;
    if cfg.steps == 0 {
        return Err(VariationalError::Empty("step"));
    }
    if cfg.n_mc == 0 {
        return Err(VariationalError::Empty("Monte Carlo sample"));
    }
    let dim = model.readout.n_params();
    let rank = cfg.rank.unwrap_or_else(|| default_rank(dim)).clamp(1, dim);
    let mut init_rng = seeded(derive_seed(cfg.seed, 0));
    let mean = initial_mean(model, &mut init_rng);
    let mut q = LowRankGaussian::diagonal(mean, &vec![1e-2; dim], rank);
    let (mut log_noise, log_noise_max) = match model.noise {
        NoiseModel::Fixed(v) => (v.ln(), f64::INFINITY),
        NoiseModel::Learned(p) => ((p.upper * 0.5).min(1.0).ln(), p.upper.ln() - 1e-9),
    };
    let learn_noise = matches!(model.noise, NoiseModel::Learned(_));
    let n_theta = dim + dim * rank + dim + usize::from(learn_noise);
    let mut optimizer = Optimizer::adam(cfg.learning_rate, n_theta);
    let mut theta = vec![0.0; n_theta];
    let mut grad = vec![0.0; n_theta];
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut clip_events = 0;
    for step in 0..cfg.steps {
        let est = elbo(&q, log_noise, model, inputs, targets, cfg.n_mc, &mut rng)?;
        if !est.value.is_finite() {
            return Err(VariationalError::Diverged(step));
        }
        trace.push(est.value);
        // pack, negate for descent, step, unpack
        let (a, b, c) = (dim, dim + dim * rank, 2 * dim + dim * rank);
        theta[..a].copy_from_slice(q.mean.as_slice());
        theta[a..b].copy_from_slice(q.factor.as_slice());
        theta[b..c].copy_from_slice(q.diag_raw.as_slice());
        grad[..a].iter_mut().zip(est.grad.mean.iter()).for_each(|(g, v)| *g = -v);
        grad[a..b].iter_mut().zip(est.grad.factor.iter()).for_each(|(g, v)| *g = -v);
        grad[b..c].iter_mut().zip(est.grad.diag_raw.iter()).for_each(|(g, v)| *g = -v);
        if learn_noise {
            theta[c] = log_noise;
            grad[c] = -est.grad_log_noise;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(VariationalError::Diverged(step));
        }
        optimizer.step(&mut theta, &grad);
        q.mean.as_mut_slice().copy_from_slice(&theta[..a]);
        q.factor.as_mut_slice().copy_from_slice(&theta[a..b]);
        q.diag_raw.as_mut_slice().copy_from_slice(&theta[b..c]);
        let mut clipped = project(&mut q, &model.prior);
        if learn_noise {
            log_noise = theta[c];
            if log_noise > log_noise_max {
                log_noise = log_noise_max;
                clipped = true;
            }
        }
        clip_events += usize::from(clipped);
    }
    Ok(VariationalFit { q, log_noise, elbo_trace: trace, clip_events })
}

/// Posterior-predictive ensemble: draw `R ~ q`, evaluate the readout and add
/// `N(0, Sigma)` observation noise. Draw `m` uses substream `m` of `seed`.
pub fn posterior_predict_vi(
    fit: &VariationalFit,
    model: &LikelihoodModel,
    states: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<EnsembleForecast, VariationalError> {
    if n_samples == 0 {
        return Err(VariationalError::Empty("sample"));
    }
    let t = states.nrows();
    let noise_sd = fit.noise_variance().sqrt();
    let mut values = vec![0.0; t * n_samples];
    for m in 0..n_samples {
        let mut rng = substream(seed, m as u64);
        let r = fit.q.sample(&mut rng);
        let out = forward_batch(&model.readout, r.as_slice(), states, None)?;
        for i in 0..t {
            let eps: f64 = StandardNormal.sample(&mut rng);
            values[i * n_samples + m] = out[(i, 0)] + noise_sd * eps;
        }
    }
    Ok(EnsembleForecast::new(n_samples, values, EnsembleSource::Vi)?)
}

/// Log evidence of the Gaussian-mean model `y_i ~ N(m, noise)`, `m ~ N(0, prior_var)`.
pub fn conjugate_mean_log_evidence(ys: &[f64], noise: f64, prior_var: f64) -> f64 {
    // y ~ N(0, noise I + prior_var 1 1^T); use the rank-one determinant and inverse
    let n = ys.len() as f64;
    let sum: f64 = ys.iter().sum();
    let ss: f64 = ys.iter().map(|y| y * y).sum();
    let log_det = n * noise.ln() + (1.0 + n * prior_var / noise).ln();
    let quad = ss / noise - prior_var * sum * sum / (noise * (noise + n * prior_var));
    -0.5 * (n * (2.0 * PI).ln() + log_det + quad)
}

#[derive(Serialize, Deserialize)]
struct QSidecar {
    dim: usize,
    rank: usize,
    prior: WeightPrior,
    seed: u64,
}

impl VariationalFit {
    /// Writes `<stem>.bin` holding `(mean, C column-major, diag_raw, log Sigma)`
    /// as little-endian f64 and `<stem>.json` with the shapes.
    pub fn save(&self, stem: &Path, prior: WeightPrior, seed: u64) -> Result<(), VariationalError> {
        let mut flat: Vec<f64> = self.q.mean.iter().copied().collect();
        flat.extend(self.q.factor.iter());
        flat.extend(self.q.diag_raw.iter());
        flat.push(self.log_noise);
        let bin = stem.with_extension("bin");
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|source| VariationalError::Io { path: bin, source })?;
        let side = QSidecar { dim: self.q.dim(), rank: self.q.rank(), prior, seed };
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_vec_pretty(&side)?).map_err(|source| VariationalError::Io { path: json, source })
    }

    pub fn load(stem: &Path) -> Result<(Self, WeightPrior), VariationalError> {
        let json = stem.with_extension("json");
        let raw = std::fs::read(&json).map_err(|source| VariationalError::Io { path: json, source })?;
        let side: QSidecar = serde_json::from_slice(&raw)?;
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).map_err(|source| VariationalError::Io { path: bin, source })?;
        let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (d, r) = (side.dim, side.rank);
        let expected = 2 * d + d * r + 1;
        if flat.len() != expected {
            return Err(VariationalError::Shape { what: "saved parameters", expected, got: flat.len() });
        }
        let q = LowRankGaussian::new(
            DVector::from_column_slice(&flat[..d]),
            DMatrix::from_column_slice(d, r, &flat[d..d + d * r]),
            DVector::from_column_slice(&flat[d + d * r..2 * d + d * r]),
        )?;
        let fit = Self { q, log_noise: flat[expected - 1], elbo_trace: vec![], clip_events: 0 };
        Ok((fit, side.prior))
    }
}

/// Log-density of the isotropic Gaussian prior at `r`; used by tests and
/// diagnostics.
pub fn isotropic_log_prior(r: &[f64], std: f64) -> f64 {
    r.iter().map(|&x| normal_log_density(x, 0.0, std * std)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_q(d: usize, r: usize, seed: u64) -> LowRankGaussian {
        let mut rng = seeded(seed);
        LowRankGaussian::new(
            DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(d, r, |_, _| rng.random_range(-0.8..0.8)),
            DVector::from_fn(d, |_, _| rng.random_range(-2.0..1.0)),
        )
        .unwrap()
    }

    #[test]
    fn kl_to_itself_is_zero() {
        let q = LowRankGaussian::diagonal(DVector::zeros(6), &[1.0; 6], 2);
        let (kl, _) = q.kl_to_isotropic(1.0).unwrap();
        assert!(kl.abs() < 1e-10, "{kl}");
    }

    #[test]
    fn vanishing_noise_samples_the_mean() {
        let mean = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let q = LowRankGaussian::diagonal(mean.clone(), &[1e-12; 3], 1);
        let mut rng = seeded(1);
        for _ in 0..100 {
            assert!((q.sample(&mut rng) - &mean).amax() < 1e-5);
        }
    }

    #[test]
    fn log_det_matches_dense() {
        let q = random_q(5, 2, 3);
        let dense = q.covariance().determinant().ln();
        assert!((q.log_det_cov().unwrap() - dense).abs() < 1e-10);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = random_q(4, 2, 8);
        let (_, g) = q.kl_to_isotropic(1.7).unwrap();
        let h = 1e-6;
        let kl = |q: &LowRankGaussian| q.kl_to_isotropic(1.7).unwrap().0;
        for i in 0..4 {
            let mut a = q.clone();
            a.diag_raw[i] += h;
            let mut b = q.clone();
            b.diag_raw[i] -= h;
            let fd = (kl(&a) - kl(&b)) / (2.0 * h);
            assert!((fd - g.diag_raw[i]).abs() < 1e-6, "diag {i}: {fd} vs {}", g.diag_raw[i]);
            for k in 0..2 {
                let mut a = q.clone();
                a.factor[(i, k)] += h;
                let mut b = q.clone();
                b.factor[(i, k)] -= h;
                let fd = (kl(&a) - kl(&b)) / (2.0 * h);
                assert!((fd - g.factor[(i, k)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let q = random_q(4, 2, 9);
        let (_, g) = q.entropy().unwrap();
        let h = 1e-6;
        let ent = |q: &LowRankGaussian| q.entropy().unwrap().0;
        for i in 0..4 {
            let mut a = q.clone();
            a.diag_raw[i] += h;
            let mut b = q.clone();
            b.diag_raw[i] -= h;
            assert!(((ent(&a) - ent(&b)) / (2.0 * h) - g.diag_raw[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_prior_rejects_mean_outside_support() {
        let model = LikelihoodModel {
            readout: MlpSpec::linear(1, 1),
            prior: WeightPrior::Uniform { low: 0.0, high: 1.0 },
            noise: NoiseModel::Fixed(1.0),
        };
        let q = LowRankGaussian::diagonal(DVector::from_vec(vec![0.5, -0.1]), &[0.01, 0.01], 1);
        let x = DMatrix::from_element(3, 1, 1.0);
        let err = elbo(&q, 0.0, &model, &x, &[0.0; 3], 1, &mut seeded(0));
        assert!(matches!(err, Err(VariationalError::OutsideSupport { index: 1, .. })));
    }

    #[test]
    fn horseshoe_is_rejected() {
        let model = LikelihoodModel {
            readout: MlpSpec::linear(1, 1),
            prior: WeightPrior::Horseshoe,
            noise: NoiseModel::Fixed(1.0),
        };
        assert!(matches!(model.validate(), Err(VariationalError::UnsupportedPrior)));
    }

    #[test]
    fn evidence_formula_matches_single_observation() {
        // one observation: y ~ N(0, noise + prior_var)
        let e = conjugate_mean_log_evidence(&[0.7], 0.5, 2.0);
        assert!((e - normal_log_density(0.7, 0.0, 2.5)).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fit = VariationalFit { q: random_q(5, 2, 1), log_noise: -0.3, elbo_trace: vec![], clip_events: 0 };
        let stem = dir.path().join("q");
        fit.save(&stem, WeightPrior::Normal { std: 1.0 }, 4).unwrap();
        let (back, prior) = VariationalFit::load(&stem).unwrap();
        assert_eq!(back.q, fit.q);
        assert_eq!(back.log_noise, fit.log_noise);
        assert_eq!(prior, WeightPrior::Normal { std: 1.0 });
    }
}
