//! Hamiltonian Monte Carlo with unit mass, leapfrog integration and
//! dual-averaging step-size warmup.

mod readout;
mod ssvs;

pub use readout::{posterior_predict_hmc, ReadoutTarget};
pub use ssvs::{posterior_predict_ssvs, SsvsDraw, SsvsTarget};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HmcError {
    #[error("non-finite gradient at leapfrog step {step}")]
    NonFiniteGradient { step: usize },
    #[error("log density is not finite at the initial point")]
    BadInit,
    #[error("no proposal accepted during {0} warmup iterations; try a smaller initial step size")]
    NoAcceptance(usize),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("chain has no samples")]
    EmptyChain,
    #[error(transparent)]
    Readout(#[from] crate::readout::ReadoutError),
    #[error(transparent)]
    Forecast(#[from] crate::forecast::ForecastError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad diagnostics file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Unnormalized log target over an unconstrained vector.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, q: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_and_grad(q, &mut g)
    }
}

/// Adapts a closure `f(q, grad) -> log density` to [`LogDensity`].
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(q, grad)
    }
}

/// Position with its cached log density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let log_density = target.log_density_and_grad(&q, &mut grad);
        Self { q, log_density, grad }
    }

    fn is_finite(&self) -> bool {
        self.log_density.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// `H = -log pi(q) + |p|^2 / 2`.
pub fn hamiltonian(log_density: f64, p: &[f64]) -> f64 {
    -log_density + 0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// `n_steps` leapfrog steps of size `eps` from `(start, p)`; `p` is updated
/// in place.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    start: &PhasePoint,
    p: &mut [f64],
    eps: f64,
    n_steps: usize,
) -> Result<PhasePoint, HmcError> {
    let mut q = start.q.clone();
    let mut grad = start.grad.clone();
    let mut log_density = start.log_density;
    for step in 0..n_steps {
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
        for (qi, pi) in q.iter_mut().zip(p.iter()) {
            *qi += eps * pi;
        }
        log_density = target.log_density_and_grad(&q, &mut grad);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(HmcError::NonFiniteGradient { step });
        }
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
    }
    Ok(PhasePoint { q, log_density, grad })
}

/// Outcome of one transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub point: PhasePoint,
    pub accepted: bool,
    /// `H(proposal) - H(current)`; infinite for divergent trajectories.
    pub delta_h: f64,
    pub accept_prob: f64,
}

/// One HMC transition with fresh `N(0, I)` momentum and a Metropolis test.
pub fn hmc_step<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    current: &PhasePoint,
    eps: f64,
    n_leapfrog: usize,
    rng: &mut R,
) -> Transition {
    let mut p: Vec<f64> = (0..current.q.len()).map(|_| StandardNormal.sample(rng)).collect();
    let h0 = hamiltonian(current.log_density, &p);
    let u: f64 = rng.random();
    let proposal = leapfrog(target, current, &mut p, eps, n_leapfrog).ok().filter(PhasePoint::is_finite);
    let Some(proposal) = proposal else {
        return Transition { point: current.clone(), accepted: false, delta_h: f64::INFINITY, accept_prob: 0.0 };
    };
    let delta_h = hamiltonian(proposal.log_density, &p) - h0;
    if !delta_h.is_finite() {
        return Transition { point: current.clone(), accepted: false, delta_h: f64::INFINITY, accept_prob: 0.0 };
    }
    let accept_prob = (-delta_h).exp().min(1.0);
    if delta_h <= 0.0 || u < accept_prob {
        Transition { point: proposal, accepted: true, delta_h, accept_prob }
    } else {
        Transition { point: current.clone(), accepted: false, delta_h, accept_prob }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    /// Initial step size; replaced by the adapted value when `n_warmup > 0`.
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub target_accept: f64,
    /// Each iteration uses `eps * U(1 - jitter, 1 + jitter)`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { step_size: 0.1, n_leapfrog: 32, n_warmup: 500, n_samples: 1000, target_accept: 0.8, jitter: 0.1, seed: 0 }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<(), HmcError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(HmcError::Config(format!("step size {}", self.step_size)));
        }
        if self.n_leapfrog == 0 {
            return Err(HmcError::Config("leapfrog steps must be at least 1".into()));
        }
        if self.n_samples == 0 {
            return Err(HmcError::Config("need at least one kept sample".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(HmcError::Config(format!("target acceptance {}", self.target_accept)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(HmcError::Config(format!("jitter {}", self.jitter)));
        }
        Ok(())
    }
}

/// Nesterov dual averaging of `log eps`.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    m: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self { mu: (10.0 * eps0).ln(), target, h_bar: 0.0, log_eps: eps0.ln(), log_eps_bar: 0.0, m: 0.0 }
    }

    fn update(&mut self, accept_prob: f64) {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }
}

/// Doubles or halves `eps` until a single leapfrog step crosses acceptance 1/2.
fn reasonable_step_size<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    start: &PhasePoint,
    eps0: f64,
    rng: &mut R,
) -> f64 {
    let log_accept = |eps: f64, rng: &mut R| {
        let mut p: Vec<f64> = (0..start.q.len()).map(|_| StandardNormal.sample(rng)).collect();
        let h0 = hamiltonian(start.log_density, &p);
        match leapfrog(target, start, &mut p, eps, 1) {
            Ok(end) if end.is_finite() => h0 - hamiltonian(end.log_density, &p),
            _ => f64::NEG_INFINITY,
        }
    };
    let mut eps = eps0;
    let up = log_accept(eps, rng) > 0.5f64.ln();
    for _ in 0..60 {
        let next = if up { eps * 2.0 } else { eps * 0.5 };
        let crossed = (log_accept(next, rng) > 0.5f64.ln()) != up;
        if crossed {
            return if up { eps } else { next };
        }
        eps = next;
    }
    eps
}

/// Kept draws plus diagnostics.
#[derive(Debug, Clone)]
pub struct Chain {
    /// `n_samples x D`.
    pub samples: DMatrix<f64>,
    pub log_densities: Vec<f64>,
    pub acceptance_rate: f64,
    pub warmup_acceptance_rate: f64,
    pub step_size: f64,
    pub divergences: usize,
    pub ess: Vec<f64>,
    pub wall_secs: f64,
    pub config: HmcConfig,
}

impl Chain {
    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.samples.row_mean().iter().copied().collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.samples.row_variance().iter().map(|v| v.sqrt()).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.column(j).iter().copied().collect()
    }
}

/// Warmup with step-size adaptation, then `n_samples` kept transitions.
pub fn run_chain<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    init: &[f64],
    cfg: &HmcConfig,
    rng: &mut R,
) -> Result<Chain, HmcError> {
    cfg.validate()?;
    if init.len() != target.dim() {
        return Err(HmcError::Shape { what: "initial point", expected: target.dim(), got: init.len() });
    }
    let started = Instant::now();
    let mut point = PhasePoint::new(target, init.to_vec());
    if !point.is_finite() {
        return Err(HmcError::BadInit);
    }
    let mut eps = cfg.step_size;
    let mut warm_accepted = 0usize;
    let mut divergences = 0usize;
    if cfg.n_warmup > 0 {
        eps = reasonable_step_size(target, &point, eps, rng);
        let mut da = DualAveraging::new(eps, cfg.target_accept);
        let restarts = warmup_restarts(cfg.n_warmup);
        for i in 0..cfg.n_warmup {
            if restarts.contains(&i) {
                eps = reasonable_step_size(target, &point, da.log_eps_bar.exp(), rng);
                da = DualAveraging::new(eps, cfg.target_accept);
            }
            let e = jittered(da.log_eps.exp(), cfg.jitter, rng);
            let tr = hmc_step(target, &point, e, cfg.n_leapfrog, rng);
            warm_accepted += usize::from(tr.accepted);
            da.update(tr.accept_prob);
            point = tr.point;
        }
        if warm_accepted == 0 {
            return Err(HmcError::NoAcceptance(cfg.n_warmup));
        }
        eps = da.log_eps_bar.exp();
    }
    let d = target.dim();
    let mut samples = DMatrix::zeros(cfg.n_samples, d);
    let mut log_densities = Vec::with_capacity(cfg.n_samples);
    let mut accepted = 0usize;
    for i in 0..cfg.n_samples {
        let e = jittered(eps, cfg.jitter, rng);
        let tr = hmc_step(target, &point, e, cfg.n_leapfrog, rng);
        accepted += usize::from(tr.accepted);
        divergences += usize::from(tr.delta_h.is_infinite());
        point = tr.point;
        for (j, v) in point.q.iter().enumerate() {
            samples[(i, j)] = *v;
        }
        log_densities.push(point.log_density);
    }
    let wall_secs = started.elapsed().as_secs_f64();
    let ess = (0..d).map(|j| effective_sample_size(samples.column(j).as_slice())).collect();
    Ok(Chain {
        samples,
        log_densities,
        acceptance_rate: accepted as f64 / cfg.n_samples as f64,
        warmup_acceptance_rate: if cfg.n_warmup > 0 { warm_accepted as f64 / cfg.n_warmup as f64 } else { f64::NAN },
        step_size: eps,
        divergences,
        ess,
        wall_secs,
        config: *cfg,
    })
}

/// Warmup iterations at which step-size adaptation starts over: the ends of
/// doubling windows `n/8, n/4, n/2`. Step sizes tuned during the transient
/// from a poor starting point are usually far off for the typical set.
fn warmup_restarts(n_warmup: usize) -> Vec<usize> {
    if n_warmup < 80 {
        return Vec::new();
    }
    vec![n_warmup / 8, n_warmup / 4, n_warmup / 2]
}

fn jittered<R: Rng + ?Sized>(eps: f64, jitter: f64, rng: &mut R) -> f64 {
    if jitter == 0.0 {
        eps
    } else {
        eps * rng.random_range(1.0 - jitter..1.0 + jitter)
    }
}

/// Effective sample size using Geyer's initial positive sequence.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let rho = |k: usize| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let mut pair = rho(k) + rho(k + 1);
        if pair <= 0.0 {
            break;
        }
        // monotone sequence estimator
        pair = pair.min(prev_pair);
        prev_pair = pair;
        sum += pair;
        k += 2;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / (n as f64).log10());
    n as f64 / tau
}

#[derive(Serialize, Deserialize)]
struct ChainDiagnostics {
    n_samples: usize,
    dim: usize,
    acceptance_rate: f64,
    warmup_acceptance_rate: Option<f64>,
    step_size: f64,
    divergences: usize,
    ess: Vec<f64>,
    wall_secs: f64,
    config: HmcConfig,
}

impl Chain {
    /// Writes `<stem>.bin` (row-major little-endian f64 samples) and
    /// `<stem>.json` (diagnostics and config).
    pub fn save(&self, stem: &Path) -> Result<(), HmcError> {
        let bin = stem.with_extension("bin");
        let mut bytes = Vec::with_capacity(self.samples.len() * 8);
        for row in self.samples.row_iter() {
            for v in row.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&bin, bytes).map_err(|source| HmcError::Io { path: bin, source })?;
        let diag = ChainDiagnostics {
            n_samples: self.n_samples(),
            dim: self.dim(),
            acceptance_rate: self.acceptance_rate,
            warmup_acceptance_rate: Some(self.warmup_acceptance_rate).filter(|v| v.is_finite()),
            step_size: self.step_size,
            divergences: self.divergences,
            ess: self.ess.clone(),
            wall_secs: self.wall_secs,
            config: self.config,
        };
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_vec_pretty(&diag)?).map_err(|source| HmcError::Io { path: json, source })
    }

    pub fn load(stem: &Path) -> Result<Self, HmcError> {
        let json = stem.with_extension("json");
        let raw = std::fs::read(&json).map_err(|source| HmcError::Io { path: json, source })?;
        let diag: ChainDiagnostics = serde_json::from_slice(&raw)?;
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).map_err(|source| HmcError::Io { path: bin, source })?;
        let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if flat.len() != diag.n_samples * diag.dim {
            return Err(HmcError::Shape { what: "saved samples", expected: diag.n_samples * diag.dim, got: flat.len() });
        }
        Ok(Self {
            samples: DMatrix::from_row_slice(diag.n_samples, diag.dim, &flat),
            log_densities: vec![],
            acceptance_rate: diag.acceptance_rate,
            warmup_acceptance_rate: diag.warmup_acceptance_rate.unwrap_or(f64::NAN),
            step_size: diag.step_size,
            divergences: diag.divergences,
            ess: diag.ess,
            wall_secs: diag.wall_secs,
            config: diag.config,
        })
    }
}
