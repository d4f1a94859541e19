//! Batch normalization without moving averages.
//!
//! Training always normalizes with the current minibatch's statistics and
//! remembers them as the layer's last statistics. There is no exponential
//! moving average anywhere: the only evaluation statistics are the
//! all-reduce-averaged last-minibatch statistics of all workers, synchronized
//! once before each validation pass. Any subsequent training step invalidates
//! the synchronized values.

use crate::collective::{all_reduce, CommPrecision, ReduceOp};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-feature mean and biased variance of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// State of one batch-norm layer: learned scale/shift plus the last and
/// synchronized minibatch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerState {
    pub gamma: Tensor,
    pub beta: Tensor,
    last: Option<BatchStats>,
    synced: Option<BatchStats>,
}

impl BnLayerState {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            last: None,
            synced: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn last_stats(&self) -> Option<&BatchStats> {
        self.last.as_ref()
    }

    pub fn synced_stats(&self) -> Option<&BatchStats> {
        self.synced.as_ref()
    }

    /// Install externally computed statistics as the last minibatch's
    /// (useful for checkpoint restore and tests).
    pub fn set_last_stats(&mut self, stats: BatchStats) -> Result<()> {
        self.check_feature_shape(&stats)?;
        self.last = Some(stats);
        self.synced = None;
        Ok(())
    }

    pub fn set_synced_stats(&mut self, stats: BatchStats) -> Result<()> {
        self.check_feature_shape(&stats)?;
        self.synced = Some(stats);
        Ok(())
    }

    fn check_feature_shape(&self, stats: &BatchStats) -> Result<()> {
        for t in [&stats.mean, &stats.var] {
            if t.shape() != self.gamma.shape() {
                return Err(Error::ShapeMismatch {
                    expected: self.gamma.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(&v) = stats.var.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidHyper { name: "variance", value: v });
        }
        Ok(())
    }
}

fn check_2d(x: &Tensor, features: usize) -> Result<(usize, usize)> {
    match x.shape() {
        [batch, f] if *f == features => Ok((*batch, *f)),
        _ => Err(Error::ShapeMismatch {
            expected: vec![0, features],
            got: x.shape().to_vec(),
        }),
    }
}

/// Per-feature mean and biased variance (divisor = batch) of `[batch,
/// features]` input.
pub fn batch_stats(x: &Tensor, features: usize) -> Result<BatchStats> {
    let (batch, f) = check_2d(x, features)?;
    let data = x.data();
    let mut mean = vec![0.0; f];
    for row in 0..batch {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += data[row * f + j];
        }
    }
    for m in &mut mean {
        *m /= batch as f64;
    }
    let mut var = vec![0.0; f];
    for row in 0..batch {
        for (j, v) in var.iter_mut().enumerate() {
            let d = data[row * f + j] - mean[j];
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= batch as f64;
    }
    Ok(BatchStats {
        mean: Tensor::from_vec(mean),
        var: Tensor::from_vec(var),
    })
}

fn normalize(x: &Tensor, stats: &BatchStats, state: &BnLayerState, eps: f64) -> Tensor {
    let f = state.features();
    let batch = x.len() / f;
    let (mean, var) = (stats.mean.data(), stats.var.data());
    let (gamma, beta) = (state.gamma.data(), state.beta.data());
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for row in 0..batch {
        for j in 0..f {
            let idx = row * f + j;
            out[idx] = gamma[j] * (data[idx] - mean[j]) * inv_std[j] + beta[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// Training-mode forward: normalize with the current batch's statistics and
/// record them as the layer's last statistics (invalidating any synced ones).
///
/// Requires `batch >= 2`; a single row has degenerate variance.
pub fn bn_forward_train(x: &Tensor, state: &mut BnLayerState, eps: f64) -> Result<Tensor> {
    let (batch, _) = check_2d(x, state.features())?;
    if batch < 2 {
        return Err(Error::BatchTooSmall { batch });
    }
    let stats = batch_stats(x, state.features())?;
    let out = normalize(x, &stats, state, eps);
    state.last = Some(stats);
    state.synced = None;
    Ok(out)
}

/// Evaluation-mode forward: normalize with the synchronized statistics.
/// Works for any batch size, including 1. Requires a prior
/// [`sync_statistics`].
pub fn bn_forward_eval(x: &Tensor, state: &BnLayerState, eps: f64) -> Result<Tensor> {
    check_2d(x, state.features())?;
    let stats = state.synced.as_ref().ok_or(Error::MissingSyncedStats)?;
    Ok(normalize(x, stats, state, eps))
}

/// How per-worker variances combine during synchronization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceCombine {
    /// Arithmetic average of the per-worker biased variances.
    #[default]
    Simple,
    /// Law-of-total-variance combination: average second moment minus the
    /// squared average mean.
    Pooled,
}

/// All-reduce-average each worker's last-minibatch statistics and install
/// them as every worker's synchronized statistics. Returns the number of
/// values that saturated on a half-precision wire.
pub fn sync_statistics(
    states: &mut [&mut BnLayerState],
    precision: CommPrecision,
    combine: VarianceCombine,
) -> Result<u64> {
    if states.is_empty() {
        return Ok(0);
    }
    let mut means = Vec::with_capacity(states.len());
    let mut vars = Vec::with_capacity(states.len());
    for (worker, state) in states.iter().enumerate() {
        let stats = state
            .last_stats()
            .ok_or(Error::UnpopulatedStats { worker })?;
        means.push(stats.mean.clone());
        vars.push(stats.var.clone());
    }

    let mut saturations = 0;
    let mean_out = all_reduce(&means, ReduceOp::Average, precision)?;
    saturations += mean_out.saturated_values;
    let synced_mean = mean_out.tensor;

    let synced_var = match combine {
        VarianceCombine::Simple => {
            let var_out = all_reduce(&vars, ReduceOp::Average, precision)?;
            saturations += var_out.saturated_values;
            var_out.tensor
        }
        VarianceCombine::Pooled => {
            // second moment per worker: var + mean^2
            let seconds: Vec<Tensor> = means
                .iter()
                .zip(&vars)
                .map(|(m, v)| v.add(&m.square()).expect("same shape"))
                .collect();
            let second_out = all_reduce(&seconds, ReduceOp::Average, precision)?;
            saturations += second_out.saturated_values;
            let mut pooled = second_out.tensor.sub(&synced_mean.square())?;
            // clamp tiny negative values from cancellation
            for v in pooled.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            pooled
        }
    };

    for state in states.iter_mut() {
        state.synced = Some(BatchStats {
            mean: synced_mean.clone(),
            var: synced_var.clone(),
        });
    }
    Ok(saturations)
}

/// Gradients of the training-mode forward.
#[derive(Debug, Clone)]
pub struct BnGradients {
    pub grad_x: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
}

/// Analytic backward pass of [`bn_forward_train`], recomputing the batch
/// statistics from `x`.
pub fn bn_backward(
    grad_out: &Tensor,
    x: &Tensor,
    state: &BnLayerState,
    eps: f64,
) -> Result<BnGradients> {
    let f = state.features();
    let (batch, _) = check_2d(x, f)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    if batch < 2 {
        return Err(Error::BatchTooSmall { batch });
    }

    let stats = batch_stats(x, f)?;
    let (mean, var) = (stats.mean.data(), stats.var.data());
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let (gamma, go, xd) = (state.gamma.data(), grad_out.data(), x.data());

    // column sums of grad_out and of grad_out * xhat
    let mut grad_beta = vec![0.0; f];
    let mut grad_gamma = vec![0.0; f];
    for row in 0..batch {
        for j in 0..f {
            let idx = row * f + j;
            let xhat = (xd[idx] - mean[j]) * inv_std[j];
            grad_beta[j] += go[idx];
            grad_gamma[j] += go[idx] * xhat;
        }
    }

    // grad_x = inv_std/N * gamma * (N*go - sum(go) - xhat * sum(go*xhat))
    let n = batch as f64;
    let mut grad_x = vec![0.0; x.len()];
    for row in 0..batch {
        for j in 0..f {
            let idx = row * f + j;
            let xhat = (xd[idx] - mean[j]) * inv_std[j];
            grad_x[idx] = gamma[j] * inv_std[j] / n
                * (n * go[idx] - grad_beta[j] - xhat * grad_gamma[j]);
        }
    }

    Ok(BnGradients {
        grad_x: Tensor::new(x.shape().to_vec(), grad_x).expect("shape preserved"),
        grad_gamma: Tensor::from_vec(grad_gamma),
        grad_beta: Tensor::from_vec(grad_beta),
    })
}
