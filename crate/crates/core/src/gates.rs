//! Hard-concrete stochastic gates and their expected-L0 penalty.
//!
//! Every gated weight `w_j = w~_j * m_j` has a location parameter `log_alpha_j`.
//! During training `m_j` is a clamped, stretched binary-concrete sample:
//!
//! ```text
//! s    = sigmoid((log_alpha + log(u / (1 - u))) / beta),  u ~ U(0, 1)
//! sbar = gamma + (zeta - gamma) * s
//! m    = min(1, max(0, sbar))
//! ```
//!
//! The probability that a gate is non-zero is
//! `sigmoid(log_alpha - beta * log(-gamma / zeta))`, which summed over all
//! gates is the differentiable L0 penalty. At evaluation time the noise is
//! dropped: `m* = min(1, max(0, gamma + (zeta - gamma) * sigmoid(log_alpha)))`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId, Scalar, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(invalid(format!(
                "gate shape needs beta > 0, gamma < 0 < 1 < zeta; got {self:?}"
            )));
        }
        Ok(())
    }

    /// `beta * log(-gamma / zeta)`, the shift inside the penalty sigmoid.
    pub fn penalty_shift(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }

    /// Probability that a training-time gate is non-zero.
    pub fn prob_nonzero(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.penalty_shift())
    }

    /// Gate value for a given uniform draw `u`.
    pub fn sample_value(&self, log_alpha: f64, u: f64) -> f64 {
        let s = sigmoid((log_alpha + (u / (1.0 - u)).ln()) / self.beta);
        (self.gamma + (self.zeta - self.gamma) * s).clamp(0.0, 1.0)
    }

    /// Deterministic evaluation-time gate value.
    pub fn test_value(&self, log_alpha: f64) -> f64 {
        (self.gamma + (self.zeta - self.gamma) * sigmoid(log_alpha)).clamp(0.0, 1.0)
    }
}

/// Draws `log(u / (1 - u))` for every entry, keeping `u` strictly inside (0, 1).
pub fn logistic_noise<T: Scalar>(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Tensor<T> {
    const EPS: f64 = 1e-6;
    Tensor::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random::<f64>() * (1.0 - 2.0 * EPS) + EPS;
        T::from_f64_lossy((u / (1.0 - u)).ln())
    })
}

/// Reparameterized gate sample; gradients reach `log_alpha` wherever the
/// stretched value lies strictly inside (0, 1).
pub fn sample_gates<T: Scalar>(
    g: &mut Graph<T>,
    log_alpha: NodeId,
    cfg: &GateConfig,
    rng: &mut crate::rng::Rng,
) -> Result<NodeId> {
    let [rows, cols] = g.shape(log_alpha);
    let noise = g.constant(logistic_noise(rows, cols, rng));
    gate_from_noise(g, log_alpha, noise, cfg)
}

/// Gate sample for an explicit logistic-noise tensor.
pub fn gate_from_noise<T: Scalar>(
    g: &mut Graph<T>,
    log_alpha: NodeId,
    noise: NodeId,
    cfg: &GateConfig,
) -> Result<NodeId> {
    let pre = g.add(log_alpha, noise)?;
    let pre = g.scale(pre, 1.0 / cfg.beta)?;
    let s = g.sigmoid(pre)?;
    let stretched = g.scale(s, cfg.zeta - cfg.gamma)?;
    let stretched = g.offset(stretched, cfg.gamma)?;
    g.clamp01(stretched)
}

/// `sum_j sigmoid(log_alpha_j - beta * log(-gamma / zeta))` over all tensors.
pub fn l0_penalty<T: Scalar>(g: &mut Graph<T>, log_alpha: &[NodeId], cfg: &GateConfig) -> Result<NodeId> {
    let shift = cfg.penalty_shift();
    let mut total: Option<NodeId> = None;
    for &la in log_alpha {
        let shifted = g.offset(la, -shift)?;
        let p = g.sigmoid(shifted)?;
        let s = g.sum(p)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

/// Expected number of non-zero gates, outside any graph.
pub fn expected_l0<T: Scalar>(log_alpha: &[Tensor<T>], cfg: &GateConfig) -> f64 {
    log_alpha
        .iter()
        .flat_map(|t| t.as_slice().iter())
        .map(|&la| cfg.prob_nonzero(la.to_f64_lossy()))
        .sum()
}

pub fn test_mask<T: Scalar>(log_alpha: &Tensor<T>, cfg: &GateConfig) -> Tensor<T> {
    log_alpha.map(|la| T::from_f64_lossy(cfg.test_value(la.to_f64_lossy())))
}

/// Fresh gate parameters: `log_alpha ~ Normal(mean, sd)`.
pub fn init_log_alpha<T: Scalar>(
    rows: usize,
    cols: usize,
    mean: f64,
    sd: f64,
    rng: &mut crate::rng::Rng,
) -> Tensor<T> {
    let normal = Normal::new(mean, sd).expect("sd is finite and non-negative");
    Tensor::from_fn(rows, cols, |_, _| T::from_f64_lossy(normal.sample(rng)))
}

pub const INIT_LOG_ALPHA_MEAN: f64 = 2.0;
pub const INIT_LOG_ALPHA_SD: f64 = 0.1;
