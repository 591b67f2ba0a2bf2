//! Exhaustive search over readout and method hyperparameters, ranked by
//! validation MSE.

use crate::config::{ExperimentConfig, Method};
use crate::error::HarnessError;
use crate::experiment::validate_once;
use crate::pipeline::{prepare, Prepared};
use resq::prior::WeightPrior;
use resq::readout::Activation;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Values to try per hyperparameter. An empty list keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub layers: Vec<usize>,
    pub units: Vec<usize>,
    pub activation: Vec<Activation>,
    pub prior: Vec<WeightPrior>,
    pub learning_rate: Vec<f64>,
    pub keep_prob: Vec<f64>,
}

/// One point of the grid; `None` fields keep the base value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Candidate {
    pub layers: Option<usize>,
    pub units: Option<usize>,
    pub activation: Option<Activation>,
    pub prior: Option<WeightPrior>,
    pub learning_rate: Option<f64>,
    pub keep_prob: Option<f64>,
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

impl GridSpec {
    /// The standard search space restricted to what applies to `method`.
    /// Learning rates and keep probabilities are sampled from their usual
    /// intervals.
    pub fn default_for(method: Method) -> Self {
        let mut g = Self::default();
        if method != Method::Ssvs {
            g.layers = vec![1, 2, 3];
            g.units = vec![8, 16, 32, 128, 256, 512];
            g.activation = vec![Activation::Tanh, Activation::Relu];
        }
        if matches!(method, Method::Vi | Method::Mcmc | Method::McmcPca) {
            g.prior = vec![
                WeightPrior::Normal { std: 1.0 },
                WeightPrior::Normal { std: 10.0 },
                WeightPrior::Uniform { low: 0.0, high: 1.0 },
                WeightPrior::Uniform { low: 0.0, high: 10.0 },
            ];
        }
        if method.uses_learning_rate() {
            g.learning_rate = vec![1e-4, 1e-3, 1e-2, 1e-1];
        }
        if method == Method::Dropout {
            g.keep_prob = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        }
        g
    }

    /// Cartesian size.
    pub fn size(&self) -> usize {
        [
            self.layers.len(),
            self.units.len(),
            self.activation.len(),
            self.prior.len(),
            self.learning_rate.len(),
            self.keep_prob.len(),
        ]
        .iter()
        .map(|&n| n.max(1))
        .product()
    }

    /// All candidates in lexicographic order (layers outermost).
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::with_capacity(self.size());
        for layers in axis(&self.layers) {
            for units in axis(&self.units) {
                for activation in axis(&self.activation) {
                    for prior in axis(&self.prior) {
                        for learning_rate in axis(&self.learning_rate) {
                            for keep_prob in axis(&self.keep_prob) {
                                out.push(Candidate { layers, units, activation, prior, learning_rate, keep_prob });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl Candidate {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let p = &mut cfg.params;
        p.layers = self.layers.or(p.layers);
        p.units = self.units.or(p.units);
        p.activation = self.activation.or(p.activation);
        p.prior = self.prior.or(p.prior);
        p.learning_rate = self.learning_rate.or(p.learning_rate);
        p.keep_prob = self.keep_prob.or(p.keep_prob);
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEntry {
    pub candidate: Candidate,
    pub validation_mse: f64,
    pub validation_cal: f64,
    pub n_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFailure {
    pub candidate: Candidate,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub size: usize,
    pub best: ExperimentConfig,
    /// Sorted by validation MSE, then parameter count, then cal.
    pub leaderboard: Vec<GridEntry>,
    pub failures: Vec<GridFailure>,
}

fn evaluate(base: &ExperimentConfig, prep: &Prepared, c: &Candidate) -> Result<GridEntry, String> {
    let cfg = c.apply(base);
    cfg.validate().map_err(|e| e.to_string())?;
    let v = validate_once(&cfg, prep).map_err(|e| e.to_string())?;
    Ok(GridEntry { candidate: *c, validation_mse: v.mse, validation_cal: v.cal, n_params: v.n_params })
}

/// Evaluates every candidate once on the calibration split. With
/// `threads > 1` candidates run concurrently; each candidate's seeds depend
/// only on the base config, so the outcome does not depend on scheduling.
pub fn grid_search(grid: &GridSpec, base: &ExperimentConfig, threads: usize) -> Result<GridResult, HarnessError> {
    base.validate()?;
    let candidates = grid.candidates();
    let prep = prepare(base)?;
    let slots: Vec<Mutex<Option<Result<GridEntry, String>>>> = candidates.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= candidates.len() {
            break;
        }
        let r = evaluate(base, &prep, &candidates[i]);
        *slots[i].lock().expect("slot lock") = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..threads.max(1) {
            s.spawn(work);
        }
        work();
    });
    let mut leaderboard = Vec::new();
    let mut failures = Vec::new();
    for (c, slot) in candidates.iter().zip(slots) {
        match slot.into_inner().expect("slot lock").expect("every candidate evaluated") {
            Ok(e) if e.validation_mse.is_finite() => leaderboard.push(e),
            Ok(e) => failures.push(GridFailure { candidate: *c, error: format!("validation MSE {}", e.validation_mse) }),
            Err(error) => failures.push(GridFailure { candidate: *c, error }),
        }
    }
    if leaderboard.is_empty() {
        return Err(HarnessError::AllFailed(candidates.len()));
    }
    leaderboard.sort_by(|a, b| {
        a.validation_mse
            .total_cmp(&b.validation_mse)
            .then(a.n_params.cmp(&b.n_params))
            .then(a.validation_cal.total_cmp(&b.validation_cal))
    });
    let best = leaderboard[0].candidate.apply(base);
    Ok(GridResult { size: candidates.len(), best, leaderboard, failures })
}
