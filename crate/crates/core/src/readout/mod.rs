//! The trainable readout: a dense MLP over a flat parameter vector with
//! hand-written forward and backward passes, Bernoulli dropout masks,
//! optimizers and deterministic training.

mod optim;
mod train;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{train_deterministic, TrainOutcome};

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReadoutError {
    #[error("network needs at least one layer with positive widths, got {0:?}")]
    BadSpec(Vec<usize>),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("keep probability must lie in (0, 1], got {0}")]
    KeepProb(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss became non-finite at step {step} (last finite loss {last:e}); lower the learning rate")]
    Diverged { step: usize, last: f64 },
    #[error("invalid optimizer config: {0}")]
    Optimizer(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad parameter sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Relu => z.max(0.0),
            Self::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Tanh => {
                let a = z.tanh();
                1.0 - a * a
            }
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tanh => "tanh",
            Self::Relu => "relu",
            Self::Identity => "identity",
        })
    }
}

/// Layer widths `[input, hidden.., output]` plus one activation per hidden
/// layer. The output layer is always linear. Every layer has a bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self, ReadoutError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ReadoutError::BadSpec(widths));
        }
        if activations.len() != widths.len() - 2 {
            return Err(ReadoutError::Shape {
                what: "hidden activations",
                expected: widths.len() - 2,
                got: activations.len(),
            });
        }
        Ok(Self { widths, activations })
    }

    /// Same activation on every hidden layer.
    pub fn uniform(input: usize, hidden: &[usize], activation: Activation, output: usize) -> Result<Self, ReadoutError> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, vec![activation; hidden.len()])
    }

    /// A single affine map `input -> output`.
    pub fn linear(input: usize, output: usize) -> Self {
        Self { widths: vec![input, output], activations: vec![] }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `sum (in + 1) * out` over layers.
    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Widths of the activations that can be masked: the input and every
    /// hidden layer.
    pub fn maskable_widths(&self) -> &[usize] {
        &self.widths[..self.widths.len() - 1]
    }

    fn activation(&self, layer: usize) -> Activation {
        self.activations.get(layer).copied().unwrap_or(Activation::Identity)
    }

    /// `(weight offset, bias offset)` of each layer in the flat vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let wo = off;
                off += w[0] * w[1];
                let bo = off;
                off += w[1];
                (wo, bo)
            })
            .collect()
    }
}

/// Structured view of one layer: weights `out x in` and biases `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub biases: Vec<f64>,
}

/// Bernoulli keep-masks (entries 0 or 1) for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub keep_prob: f64,
    pub masks: Vec<Vec<f64>>,
}

/// Per-row masks for a batch forward pass: one `B x width` matrix per
/// maskable activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMasks {
    pub keep_prob: f64,
    pub masks: Vec<DMatrix<f64>>,
}

pub fn check_keep_prob(p: f64) -> Result<(), ReadoutError> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(ReadoutError::KeepProb(p))
    }
}

#[inline]
fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> f64 {
    if p >= 1.0 || rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Each entry i.i.d. Bernoulli(`p`), `p` being the keep probability.
pub fn sample_masks<R: Rng + ?Sized>(spec: &MlpSpec, p: f64, rng: &mut R) -> Result<DropoutMasks, ReadoutError> {
    check_keep_prob(p)?;
    let masks = spec.maskable_widths().iter().map(|&w| (0..w).map(|_| bernoulli(rng, p)).collect()).collect();
    Ok(DropoutMasks { keep_prob: p, masks })
}

pub fn sample_batch_masks<R: Rng + ?Sized>(
    spec: &MlpSpec,
    p: f64,
    batch: usize,
    rng: &mut R,
) -> Result<BatchMasks, ReadoutError> {
    check_keep_prob(p)?;
    let masks = spec
        .maskable_widths()
        .iter()
        .map(|&w| DMatrix::from_fn(batch, w, |_, _| bernoulli(rng, p)))
        .collect();
    Ok(BatchMasks { keep_prob: p, masks })
}

impl DropoutMasks {
    fn to_batch(&self) -> BatchMasks {
        BatchMasks {
            keep_prob: self.keep_prob,
            masks: self.masks.iter().map(|m| DMatrix::from_row_slice(1, m.len(), m)).collect(),
        }
    }
}

/// Intermediate values of a batch forward pass, kept for backprop.
pub struct ForwardCache {
    /// Input of each layer after masking and rescaling.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<DMatrix<f64>>,
    /// Activation scale applied to each layer input (`mask / p`), if masked.
    scales: Vec<Option<DMatrix<f64>>>,
    pub output: DMatrix<f64>,
}

fn check_masks(spec: &MlpSpec, batch: usize, masks: &BatchMasks) -> Result<(), ReadoutError> {
    check_keep_prob(masks.keep_prob)?;
    let widths = spec.maskable_widths();
    if masks.masks.len() != widths.len() {
        return Err(ReadoutError::Shape { what: "mask count", expected: widths.len(), got: masks.masks.len() });
    }
    for (m, &w) in masks.masks.iter().zip(widths) {
        if m.ncols() != w {
            return Err(ReadoutError::Shape { what: "mask width", expected: w, got: m.ncols() });
        }
        if m.nrows() != batch {
            return Err(ReadoutError::Shape { what: "mask rows", expected: batch, got: m.nrows() });
        }
    }
    Ok(())
}

fn weights_view<'a>(params: &'a [f64], spec: &MlpSpec, layer: usize, off: usize) -> DMatrixView<'a, f64> {
    let (n_in, n_out) = (spec.widths[layer], spec.widths[layer + 1]);
    // out x in row-major is in x out column-major, i.e. W^T
    DMatrixView::from_slice(&params[off..off + n_in * n_out], n_in, n_out)
}

/// Batch forward pass keeping everything needed by [`backward`]. With
/// masks, every maskable activation is multiplied by `mask / p` before the
/// next affine map.
pub fn forward_cached(
    spec: &MlpSpec,
    params: &[f64],
    inputs: &DMatrix<f64>,
    masks: Option<&BatchMasks>,
) -> Result<ForwardCache, ReadoutError> {
    if params.len() != spec.n_params() {
        return Err(ReadoutError::Shape { what: "parameter count", expected: spec.n_params(), got: params.len() });
    }
    if inputs.ncols() != spec.input_width() {
        return Err(ReadoutError::Shape { what: "input width", expected: spec.input_width(), got: inputs.ncols() });
    }
    let batch = inputs.nrows();
    if let Some(m) = masks {
        check_masks(spec, batch, m)?;
    }
    let offsets = spec.offsets();
    let mut layer_inputs = Vec::with_capacity(offsets.len());
    let mut pre = Vec::with_capacity(offsets.len());
    let mut scales = Vec::with_capacity(offsets.len());
    let mut a = inputs.clone();
    for (l, &(wo, bo)) in offsets.iter().enumerate() {
        let scale = masks.map(|m| &m.masks[l] / m.keep_prob);
        if let Some(s) = &scale {
            a.component_mul_assign(s);
        }
        let wt = weights_view(params, spec, l, wo);
        let mut z = &a * wt;
        let bias = &params[bo..bo + spec.widths[l + 1]];
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(bias[j]);
        }
        let act = spec.activation(l);
        let next = z.map(|v| act.apply(v));
        layer_inputs.push(a);
        pre.push(z);
        scales.push(scale);
        a = next;
    }
    Ok(ForwardCache { inputs: layer_inputs, pre, scales, output: a })
}

/// Gradient of `sum_b sum_o d_out[b, o] * output[b, o]` with respect to the
/// flat parameters.
pub fn backward(spec: &MlpSpec, params: &[f64], cache: &ForwardCache, d_out: &DMatrix<f64>) -> Vec<f64> {
    let offsets = spec.offsets();
    let mut grad = vec![0.0; params.len()];
    let mut da = d_out.clone();
    for l in (0..offsets.len()).rev() {
        let (wo, bo) = offsets[l];
        let act = spec.activation(l);
        let z = &cache.pre[l];
        let dz = if act == Activation::Identity {
            da.clone()
        } else {
            DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| da[(i, j)] * act.derivative(z[(i, j)]))
        };
        let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
        let dwt = cache.inputs[l].transpose() * &dz;
        grad[wo..wo + n_in * n_out].copy_from_slice(dwt.as_slice());
        for (j, col) in dz.column_iter().enumerate() {
            grad[bo + j] = col.sum();
        }
        if l > 0 {
            let wt = weights_view(params, spec, l, wo);
            let mut prev = dz * wt.transpose();
            if let Some(s) = &cache.scales[l] {
                prev.component_mul_assign(s);
            }
            da = prev;
        }
    }
    grad
}

pub fn forward_batch(
    spec: &MlpSpec,
    params: &[f64],
    inputs: &DMatrix<f64>,
    masks: Option<&BatchMasks>,
) -> Result<DMatrix<f64>, ReadoutError> {
    Ok(forward_cached(spec, params, inputs, masks)?.output)
}

/// Training objectives.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// Mean over batch and outputs of squared residuals.
    Mse,
    /// Mean over batch and heads of the pinball loss, head `k` at level `levels[k]`.
    Pinball(Vec<f64>),
}

/// `tau * max(r, 0) + (1 - tau) * max(-r, 0)` for residual `r = y - q`.
#[inline]
pub fn pinball(r: f64, tau: f64) -> f64 {
    if r >= 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

impl Loss {
    /// Loss value and its derivative with respect to the network outputs.
    pub fn value_and_output_grad(&self, output: &DMatrix<f64>, targets: &[f64]) -> (f64, DMatrix<f64>) {
        let (b, k) = output.shape();
        let norm = (b * k) as f64;
        let mut value = 0.0;
        let grad = match self {
            Self::Mse => DMatrix::from_fn(b, k, |i, j| {
                let r = output[(i, j)] - targets[i];
                value += r * r;
                2.0 * r / norm
            }),
            Self::Pinball(levels) => DMatrix::from_fn(b, k, |i, j| {
                let tau = levels[j];
                let r = targets[i] - output[(i, j)];
                value += pinball(r, tau);
                if r > 0.0 {
                    -tau / norm
                } else if r < 0.0 {
                    (1.0 - tau) / norm
                } else {
                    0.0
                }
            }),
        };
        (value / norm, grad)
    }

    fn check(&self, spec: &MlpSpec) -> Result<(), ReadoutError> {
        if let Self::Pinball(levels) = self {
            if levels.len() != spec.output_width() {
                return Err(ReadoutError::Shape { what: "quantile heads", expected: spec.output_width(), got: levels.len() });
            }
        }
        Ok(())
    }
}

/// Mean batch loss and its gradient with respect to the flat parameters.
pub fn loss_and_gradient(
    spec: &MlpSpec,
    params: &[f64],
    inputs: &DMatrix<f64>,
    targets: &[f64],
    loss: &Loss,
    masks: Option<&BatchMasks>,
) -> Result<(f64, Vec<f64>), ReadoutError> {
    if inputs.nrows() == 0 {
        return Err(ReadoutError::EmptyBatch);
    }
    if targets.len() != inputs.nrows() {
        return Err(ReadoutError::Shape { what: "targets", expected: inputs.nrows(), got: targets.len() });
    }
    loss.check(spec)?;
    let cache = forward_cached(spec, params, inputs, masks)?;
    let (value, d_out) = loss.value_and_output_grad(&cache.output, targets);
    Ok((value, backward(spec, params, &cache, &d_out)))
}

/// An MLP with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    seed: Option<u64>,
    n_params: usize,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let params = vec![0.0; spec.n_params()];
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, ReadoutError> {
        if params.len() != spec.n_params() {
            return Err(ReadoutError::Shape { what: "parameter count", expected: spec.n_params(), got: params.len() });
        }
        Ok(Self { spec, params })
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = vec![0.0; spec.n_params()];
        for (l, (wo, _)) in spec.offsets().into_iter().enumerate() {
            let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for p in &mut params[wo..wo + n_in * n_out] {
                *p = rng.random_range(-limit..=limit);
            }
        }
        Self { spec, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> Vec<Layer> {
        self.spec
            .offsets()
            .into_iter()
            .enumerate()
            .map(|(l, (wo, bo))| {
                let (n_in, n_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
                Layer {
                    weights: DMatrix::from_row_slice(n_out, n_in, &self.params[wo..wo + n_in * n_out]),
                    biases: self.params[bo..bo + n_out].to_vec(),
                }
            })
            .collect()
    }

    pub fn from_layers(spec: MlpSpec, layers: &[Layer]) -> Result<Self, ReadoutError> {
        if layers.len() != spec.n_layers() {
            return Err(ReadoutError::Shape { what: "layer count", expected: spec.n_layers(), got: layers.len() });
        }
        let mut params = Vec::with_capacity(spec.n_params());
        for (l, layer) in layers.iter().enumerate() {
            let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
            if layer.weights.shape() != (n_out, n_in) || layer.biases.len() != n_out {
                return Err(ReadoutError::Shape { what: "layer shape", expected: n_out * n_in, got: layer.weights.len() });
            }
            params.extend(layer.weights.transpose().iter());
            params.extend(&layer.biases);
        }
        Ok(Self { spec, params })
    }

    pub fn forward(&self, state: &[f64], masks: Option<&DropoutMasks>) -> Result<Vec<f64>, ReadoutError> {
        let x = DMatrix::from_row_slice(1, state.len(), state);
        let batch = masks.map(DropoutMasks::to_batch);
        Ok(forward_batch(&self.spec, &self.params, &x, batch.as_ref())?.iter().copied().collect())
    }

    pub fn forward_batch(&self, inputs: &DMatrix<f64>, masks: Option<&BatchMasks>) -> Result<DMatrix<f64>, ReadoutError> {
        forward_batch(&self.spec, &self.params, inputs, masks)
    }

    pub fn gradient(&self, inputs: &DMatrix<f64>, targets: &[f64], loss: &Loss) -> Result<Vec<f64>, ReadoutError> {
        Ok(loss_and_gradient(&self.spec, &self.params, inputs, targets, loss, None)?.1)
    }

    /// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.json`.
    pub fn save(&self, stem: &Path, seed: Option<u64>) -> Result<(), ReadoutError> {
        let bin = stem.with_extension("bin");
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|source| ReadoutError::Io { path: bin, source })?;
        let side = Sidecar {
            widths: self.spec.widths.clone(),
            activations: self.spec.activations.clone(),
            seed,
            n_params: self.params.len(),
        };
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_vec_pretty(&side)?).map_err(|source| ReadoutError::Io { path: json, source })
    }

    pub fn load(stem: &Path) -> Result<Self, ReadoutError> {
        let json = stem.with_extension("json");
        let raw = std::fs::read(&json).map_err(|source| ReadoutError::Io { path: json, source })?;
        let side: Sidecar = serde_json::from_slice(&raw)?;
        let spec = MlpSpec::new(side.widths, side.activations)?;
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).map_err(|source| ReadoutError::Io { path: bin, source })?;
        let params: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_params(spec, params)
    }
}
