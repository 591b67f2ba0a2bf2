use super::{loss_and_gradient, sample_batch_masks, check_keep_prob, Loss, Mlp, Optimizer, OptimizerConfig, ReadoutError};
use crate::rng::seeded;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mlp: Mlp,
    /// Batch loss before each update.
    pub loss_trace: Vec<f64>,
}

/// Fixed-budget gradient training. Mini-batches are drawn from a per-epoch
/// shuffle; with `keep_prob` set, fresh per-row dropout masks are sampled at
/// every step. Everything random derives from `opt.seed`.
pub fn train_deterministic(
    mlp: Mlp,
    inputs: &DMatrix<f64>,
    targets: &[f64],
    loss: &Loss,
    opt: &OptimizerConfig,
    keep_prob: Option<f64>,
) -> Result<TrainOutcome, ReadoutError> {
    opt.validate()?;
    if let Some(p) = keep_prob {
        check_keep_prob(p)?;
    }
    let n = inputs.nrows();
    if n == 0 {
        return Err(ReadoutError::EmptyBatch);
    }
    if targets.len() != n {
        return Err(ReadoutError::Shape { what: "targets", expected: n, got: targets.len() });
    }
    let mut rng = seeded(opt.seed);
    let mut mlp = mlp;
    let mut optimizer = Optimizer::new(opt.kind, opt.learning_rate, mlp.n_params());
    let batch = opt.batch_size.map_or(n, |b| b.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = Vec::with_capacity(opt.steps);
    let mut last = f64::NAN;
    for step in 0..opt.steps {
        let (x, y);
        let (xb, yb): (&DMatrix<f64>, &[f64]) = if batch == n {
            (inputs, targets)
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            x = inputs.select_rows(idx);
            y = idx.iter().map(|&i| targets[i]).collect::<Vec<f64>>();
            (&x, &y)
        };
        let masks = match keep_prob {
            Some(p) => Some(sample_batch_masks(&mlp.spec, p, xb.nrows(), &mut rng)?),
            None => None,
        };
        let (value, grad) = loss_and_gradient(&mlp.spec, &mlp.params, xb, yb, loss, masks.as_ref())?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ReadoutError::Diverged { step, last });
        }
        last = value;
        trace.push(value);
        optimizer.step(&mut mlp.params, &grad);
    }
    Ok(TrainOutcome { mlp, loss_trace: trace })
}
