//! Hybrid momentum-SGD/RMSprop update rule with a smooth warm-up transition.
//!
//! Training starts as RMSprop and blends into momentum SGD as the share
//! coefficient `alpha_sgd` rises from ~0 to 1 along an ELU-like curve:
//! exponential below the transition center, linear up to
//! `center + period/2`, then clamped at 1. The RMSprop share is coupled as
//! `alpha_rmsprop = (1 - alpha_sgd) * eta_rmsprop / eta_sgd` so each side
//! contributes at its own learning rate while the velocity buffer stays free
//! of any learning-rate factor (momentum correction): changing the schedule
//! never rescales accumulated momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters of the hybrid rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerHyper {
    /// Momentum coefficient on the velocity buffer.
    pub momentum: f64,
    /// Decay of the squared-gradient moving average.
    pub sq_grad_decay: f64,
    /// Stability constant added after the square root.
    pub epsilon: f64,
    /// Learning rate of the RMSprop side.
    pub eta_rmsprop: f64,
    /// Epoch at which `alpha_sgd` reaches 1/2.
    pub beta_center: f64,
    /// Transition width in epochs; `alpha_sgd` reaches 1 at
    /// `beta_center + beta_period / 2`.
    pub beta_period: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            sq_grad_decay: 0.99,
            epsilon: 1e-8,
            eta_rmsprop: 0.0003,
            beta_center: 10.0,
            beta_period: 5.0,
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("momentum", self.momentum, (0.0..1.0).contains(&self.momentum)),
            (
                "sq_grad_decay",
                self.sq_grad_decay,
                (0.0..1.0).contains(&self.sq_grad_decay),
            ),
            ("epsilon", self.epsilon, self.epsilon > 0.0),
            ("eta_rmsprop", self.eta_rmsprop, self.eta_rmsprop > 0.0),
            ("beta_center", self.beta_center, self.beta_center >= 0.0),
            ("beta_period", self.beta_period, self.beta_period > 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok {
                return Err(Error::InvalidHyper { name, value });
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Moving average of the squared gradient; elementwise nonnegative.
    pub sq_grad_avg: Tensor,
    /// Velocity (momentum buffer); deliberately carries no learning-rate
    /// factor.
    pub velocity: Tensor,
    /// Iterations applied so far.
    pub step_count: u64,
}

impl OptimizerState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            sq_grad_avg: Tensor::zeros(shape),
            velocity: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// The blend of both optimizers at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendCoefficients {
    /// SGD share in `[0, 1]`.
    pub alpha_sgd: f64,
    /// RMSprop share; zero whenever `alpha_sgd` is 1.
    pub alpha_rmsprop: f64,
    /// Effective learning rate applied to the velocity.
    pub lr: f64,
}

impl BlendCoefficients {
    /// Plain momentum SGD at the given rate.
    pub fn pure_sgd(lr: f64) -> Self {
        Self { alpha_sgd: 1.0, alpha_rmsprop: 0.0, lr }
    }

    /// Plain RMSprop-with-momentum at the given rate.
    pub fn pure_rmsprop(lr: f64) -> Self {
        Self { alpha_sgd: 0.0, alpha_rmsprop: 1.0, lr }
    }
}

/// SGD share of the update at a (fractional) epoch.
///
/// Exponential `exp(2(e - center)/period)/2` below the center, linear with
/// slope `1/period` from the center (matching the exponential branch's slope
/// there, so the curve is continuously differentiable), clamped at 1 from
/// `center + period/2` onward.
pub fn alpha_sgd_at(epoch: f64, beta_center: f64, beta_period: f64) -> Result<f64> {
    if beta_period <= 0.0 {
        return Err(Error::InvalidHyper { name: "beta_period", value: beta_period });
    }
    if epoch.is_nan() || epoch < 0.0 {
        return Err(Error::NegativeEpoch { epoch });
    }
    let a = if epoch < beta_center {
        0.5 * (2.0 * (epoch - beta_center) / beta_period).exp()
    } else if epoch < beta_center + 0.5 * beta_period {
        0.5 + (epoch - beta_center) / beta_period
    } else {
        1.0
    };
    Ok(a.min(1.0))
}

/// Blend coefficients at an epoch for an SGD learning rate taken from the
/// schedule: `alpha_rmsprop = (1 - alpha_sgd) * eta_rmsprop / eta_sgd`.
pub fn blend_at(epoch: f64, eta_sgd: f64, hyper: &OptimizerHyper) -> Result<BlendCoefficients> {
    if eta_sgd <= 0.0 {
        return Err(Error::InvalidHyper { name: "eta_sgd", value: eta_sgd });
    }
    let alpha_sgd = alpha_sgd_at(epoch, hyper.beta_center, hyper.beta_period)?;
    Ok(BlendCoefficients {
        alpha_sgd,
        alpha_rmsprop: (1.0 - alpha_sgd) * hyper.eta_rmsprop / eta_sgd,
        lr: eta_sgd,
    })
}

/// One hybrid update. Pure function: returns the new parameters and state.
///
/// ```text
/// m'     = mu2 * m + (1 - mu2) * g^2
/// v'     = mu1 * v - (alpha_sgd + alpha_rmsprop / (sqrt(m') + eps)) * g
/// theta' = theta + lr * v'
/// ```
///
/// `eps` is added after the square root. The velocity carries no `lr`
/// factor, so sequences of steps with different learning rates accumulate
/// identical velocities for identical gradients.
pub fn step(
    params: &Tensor,
    grad: &Tensor,
    state: &OptimizerState,
    blend: &BlendCoefficients,
    hyper: &OptimizerHyper,
) -> Result<(Tensor, OptimizerState)> {
    if params.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            expected: params.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    if params.shape() != state.sq_grad_avg.shape() || params.shape() != state.velocity.shape() {
        return Err(Error::ShapeMismatch {
            expected: params.shape().to_vec(),
            got: state.sq_grad_avg.shape().to_vec(),
        });
    }
    if let Some(index) = grad.first_nonfinite() {
        return Err(Error::NonFinite { context: "gradient", index });
    }

    let n = params.len();
    let mut sq_grad_avg = vec![0.0; n];
    let mut velocity = vec![0.0; n];
    let mut new_params = vec![0.0; n];
    let (m_prev, v_prev) = (state.sq_grad_avg.data(), state.velocity.data());
    let (theta, g) = (params.data(), grad.data());
    for i in 0..n {
        let m = hyper.sq_grad_decay * m_prev[i] + (1.0 - hyper.sq_grad_decay) * g[i] * g[i];
        let coeff = blend.alpha_sgd + blend.alpha_rmsprop / (m.sqrt() + hyper.epsilon);
        let v = hyper.momentum * v_prev[i] - coeff * g[i];
        sq_grad_avg[i] = m;
        velocity[i] = v;
        new_params[i] = theta[i] + blend.lr * v;
    }

    let shape = params.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), new_params).expect("same shape"),
        OptimizerState {
            sq_grad_avg: Tensor::new(shape.clone(), sq_grad_avg).expect("same shape"),
            velocity: Tensor::new(shape, velocity).expect("same shape"),
            step_count: state.step_count + 1,
        },
    ))
}
