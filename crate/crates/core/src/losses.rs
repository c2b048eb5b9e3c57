//! Training objectives.
//!
//! Every objective is assembled from four pieces:
//!
//! * cross-entropy `logsumexp(z) - z_y`;
//! * its robust counterpart, where each non-target logit margin is inflated
//!   by `rho * ||J_k - J_y||_1` (`J` is the input Jacobian of the logits),
//!   the closed-form maximum of a linearized margin over an l-inf ball;
//! * the stability wrapper `theta + (1/a) * sum_n [l_n - theta]^+`, whose
//!   minimum over `theta` is the mean of the `a` largest losses;
//! * `lambda` times the expected number of open gates.
//!
//! The eight named variants switch these pieces on and off.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::error::{invalid, Result};
use crate::gates::{self, GateConfig};
use crate::network::{self, ForwardTrace, Mode, ParamNodes};
use crate::rng::Rng;

pub const DEFAULT_A_FRACTION: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Nominal,
    Robust,
    Stable,
    Sparse,
    RobustSparse,
    StableSparse,
    RobustStable,
    /// Robust, sparse and stable together.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Nominal,
        Variant::Robust,
        Variant::Stable,
        Variant::Sparse,
        Variant::RobustSparse,
        Variant::StableSparse,
        Variant::RobustStable,
        Variant::Full,
    ];

    pub fn is_robust(self) -> bool {
        matches!(self, Variant::Robust | Variant::RobustSparse | Variant::RobustStable | Variant::Full)
    }

    pub fn is_sparse(self) -> bool {
        matches!(self, Variant::Sparse | Variant::RobustSparse | Variant::StableSparse | Variant::Full)
    }

    pub fn is_stable(self) -> bool {
        matches!(self, Variant::Stable | Variant::StableSparse | Variant::RobustStable | Variant::Full)
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Nominal => "nominal",
            Variant::Robust => "robust",
            Variant::Stable => "stable",
            Variant::Sparse => "sparse",
            Variant::RobustSparse => "robust_sparse",
            Variant::StableSparse => "stable_sparse",
            Variant::RobustStable => "robust_stable",
            Variant::Full => "full",
        }
    }

    /// Column heading used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Nominal => "Nominal",
            Variant::Robust => "Robust",
            Variant::Stable => "Stable",
            Variant::Sparse => "Sparse",
            Variant::RobustSparse => "Robust+Sparse",
            Variant::StableSparse => "Stable+Sparse",
            Variant::RobustStable => "Stable+Robust",
            Variant::Full => "Full",
        }
    }

    pub fn spec(self, rho: f64, lambda: f64, a_fraction: f64, weight_decay: f64, gate: GateConfig) -> LossSpec {
        LossSpec {
            rho: self.is_robust().then_some(rho),
            lambda: self.is_sparse().then_some(lambda),
            a_fraction: self.is_stable().then_some(a_fraction),
            gate,
            weight_decay,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }
}

/// Which penalties are active. `None` switches a component off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    /// Robustness radius.
    pub rho: Option<f64>,
    /// Sparsity weight.
    pub lambda: Option<f64>,
    /// Subset size as a fraction of the batch.
    pub a_fraction: Option<f64>,
    #[serde(default)]
    pub gate: GateConfig,
    /// Ridge penalty on weights and biases; applied by the optimizer.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { rho: None, lambda: None, a_fraction: None, gate: GateConfig::default(), weight_decay: 0.0 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho {
            if !(rho >= 0.0 && rho.is_finite()) {
                return Err(invalid(format!("rho must be >= 0, got {rho}")));
            }
        }
        if let Some(lambda) = self.lambda {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
            }
            self.gate.validate()?;
        }
        if let Some(a) = self.a_fraction {
            if !(a > 0.0 && a <= 1.0) {
                return Err(invalid(format!("a_fraction must be in (0, 1], got {a}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn is_sparse(&self) -> bool {
        self.lambda.is_some()
    }

    pub fn is_stable(&self) -> bool {
        self.a_fraction.is_some()
    }

    pub fn is_robust(&self) -> bool {
        self.rho.is_some()
    }
}

/// Dual variable of the stability wrapper.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityState {
    pub theta: f64,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(invalid(format!("{} labels for {rows} examples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Per-example cross-entropy, `B x 1`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let [rows, classes] = g.shape(logits);
    check_labels(labels, rows, classes)?;
    let lse = g.logsumexp_rows(logits)?;
    let target = g.pick_cols(logits, labels)?;
    g.sub(lse, target)
}

/// Per-example linearized robust cross-entropy, `B x 1`.
///
/// `jacobian` is the stacked `(B*K) x M` input Jacobian from
/// [`network::input_jacobian`].
pub fn robust_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    trace: &ForwardTrace<T>,
    jacobian: NodeId,
    labels: &[usize],
    rho: f64,
) -> Result<NodeId> {
    if rho.is_nan() || rho < 0.0 {
        return Err(invalid(format!("rho must be >= 0, got {rho}")));
    }
    let (b, k) = (trace.batch, trace.num_classes);
    check_labels(labels, b, k)?;
    let diff = g.group_row_diff(jacobian, k, labels)?;
    let absdiff = g.abs(diff)?;
    let norms = g.sum_rows(absdiff)?;
    let norms = g.reshape(norms, b, k)?;
    let inflation = g.scale(norms, rho)?;
    let inflated = g.add(trace.logits, inflation)?;
    let lse = g.logsumexp_rows(inflated)?;
    let target = g.pick_cols(trace.logits, labels)?;
    g.sub(lse, target)
}

/// Subset size for a batch: `max(1, round(a_fraction * batch))`.
pub fn subset_size(a_fraction: f64, batch: usize) -> usize {
    ((a_fraction * batch as f64).round() as usize).clamp(1, batch.max(1))
}

/// `theta + (1/a) * sum_n [l_n - theta]^+` as a scalar node.
pub fn cvar_wrap<T: Scalar>(g: &mut Graph<T>, losses: NodeId, theta: NodeId, a: usize) -> Result<NodeId> {
    let [n, cols] = g.shape(losses);
    if cols != 1 {
        return Err(invalid(format!("losses must be a column, got {n}x{cols}")));
    }
    if a == 0 || a > n {
        return Err(invalid(format!("subset size {a} out of range 1..={n}")));
    }
    if g.shape(theta) != [1, 1] {
        return Err(invalid("theta must be a scalar"));
    }
    let shifted = g.sub(losses, theta)?;
    let excess = g.hinge_pos(shifted)?;
    let total = g.sum(excess)?;
    let avg = g.scale(total, 1.0 / a as f64)?;
    g.add(avg, theta)
}

/// Value of the stability wrapper outside a graph.
pub fn cvar_value(losses: &[f64], theta: f64, a: usize) -> f64 {
    theta + losses.iter().map(|l| (l - theta).max(0.0)).sum::<f64>() / a as f64
}

/// The `a`-th largest loss, a minimizer of [`cvar_value`] over `theta`.
pub fn cvar_optimal_theta(losses: &[f64], a: usize) -> Result<f64> {
    if a == 0 || a > losses.len() {
        return Err(invalid(format!("subset size {a} out of range 1..={}", losses.len())));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|x, y| y.total_cmp(x));
    Ok(sorted[a - 1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSampling {
    /// One gate draw shared by the whole batch.
    #[default]
    PerBatch,
    /// A fresh gate draw for every example.
    PerExample,
}

#[derive(Clone, Copy, Debug)]
pub struct ComposeOptions {
    pub dropout: f64,
    pub mode: Mode,
    pub gate_sampling: GateSampling,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self { dropout: 0.0, mode: Mode::Train, gate_sampling: GateSampling::PerBatch }
    }
}

pub struct Batch<'a, T> {
    pub x: &'a Tensor<T>,
    pub y: &'a [usize],
}

/// Nodes produced by [`compose`].
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: NodeId,
    pub per_example: NodeId,
    /// Expected-L0 penalty before scaling by `lambda`.
    pub l0: Option<NodeId>,
}

fn example_losses<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LossSpec,
    params: &ParamNodes,
    masks: Option<&[NodeId]>,
    x: NodeId,
    labels: &[usize],
    opts: &ComposeOptions,
    dropout_rng: &mut Rng,
) -> Result<NodeId> {
    let trace = network::forward(g, params, masks, x, opts.dropout, opts.mode, dropout_rng)?;
    match spec.rho {
        Some(rho) => {
            let jac = network::input_jacobian(g, &trace)?;
            robust_cross_entropy(g, &trace, jac, labels, rho)
        }
        None => cross_entropy(g, trace.logits, labels),
    }
}

fn draw_masks<T: Scalar>(
    g: &mut Graph<T>,
    log_alpha: &[NodeId],
    cfg: &GateConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<NodeId>> {
    log_alpha
        .iter()
        .map(|&la| match mode {
            Mode::Train => gates::sample_gates(g, la, cfg, rng),
            Mode::Eval => {
                let m = gates::test_mask(g.value(la), cfg);
                Ok(g.constant(m))
            }
        })
        .collect()
}

/// Builds the scalar training objective selected by `spec`.
///
/// Weight decay is not part of the graph; the optimizer applies it.
#[allow(clippy::too_many_arguments)]
pub fn compose<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LossSpec,
    batch: &Batch<'_, T>,
    params: &ParamNodes,
    theta: Option<NodeId>,
    opts: &ComposeOptions,
    gate_rng: &mut Rng,
    dropout_rng: &mut Rng,
) -> Result<Objective> {
    spec.validate()?;
    let log_alpha = match (spec.is_sparse(), &params.log_alpha) {
        (true, Some(la)) => Some(la.clone()),
        (true, None) => return Err(invalid("sparse objective needs gate parameters")),
        (false, _) => None,
    };
    let theta = match (spec.is_stable(), theta) {
        (true, Some(t)) => Some(t),
        (true, None) => return Err(invalid("stable objective needs theta")),
        (false, _) => None,
    };

    let n = batch.x.rows();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let per_example = match (&log_alpha, opts.gate_sampling, opts.mode) {
        (Some(la), GateSampling::PerExample, Mode::Train) => {
            let mut parts = Vec::with_capacity(n);
            for b in 0..n {
                let masks = draw_masks(g, la, &spec.gate, opts.mode, gate_rng)?;
                let xb = g.constant(batch.x.select_rows(&[b]));
                parts.push(example_losses(g, spec, params, Some(&masks), xb, &batch.y[b..=b], opts, dropout_rng)?);
            }
            g.concat_rows(&parts)?
        }
        _ => {
            let masks = match &log_alpha {
                Some(la) => Some(draw_masks(g, la, &spec.gate, opts.mode, gate_rng)?),
                None => None,
            };
            let x = g.constant(batch.x.clone());
            example_losses(g, spec, params, masks.as_deref(), x, batch.y, opts, dropout_rng)?
        }
    };

    let mut loss = match (spec.a_fraction, theta) {
        (Some(frac), Some(theta)) => cvar_wrap(g, per_example, theta, subset_size(frac, n))?,
        _ => g.mean(per_example)?,
    };
    let mut l0 = None;
    if let (Some(lambda), Some(la)) = (spec.lambda, &log_alpha) {
        let pen = gates::l0_penalty(g, la, &spec.gate)?;
        let scaled = g.scale(pen, lambda)?;
        loss = g.add(loss, scaled)?;
        l0 = Some(pen);
    }
    Ok(Objective { loss, per_example, l0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MlpParams;
    use crate::rng;

    fn ce_of(z: &[f64], y: usize) -> f64 {
        let mut g = Graph::new();
        let zn = g.constant(Tensor::from_f64(1, z.len(), z).unwrap());
        let l = cross_entropy(&mut g, zn, &[y]).unwrap();
        g.value(l).item()
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce_of(&[0., 0., 0.], 2) - 3f64.ln()).abs() < 1e-15);
        assert!((ce_of(&[2., 0., 0.], 0) - (1.0 + 2.0 * (-2f64).exp()).ln()).abs() < 1e-15);
        assert!((ce_of(&[2., 0., 0.], 0) - 0.2395).abs() < 1e-4);
        let v = ce_of(&[0., 10.], 1);
        assert!((v - (-10f64).exp().ln_1p()).abs() < 1e-14);
        assert!((v - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let zn = g.constant(Tensor::zeros(1, 3));
        assert!(cross_entropy(&mut g, zn, &[3]).is_err());
    }

    #[test]
    fn robust_identity_net_example() {
        // z = x with K = M = 2, x = 0, y = 0, rho = 0.1
        let p = MlpParams {
            layers: vec![crate::network::Layer {
                weight: Tensor::<f64>::from_f64(2, 2, &[1., 0., 0., 1.]).unwrap(),
                bias: Tensor::zeros(1, 2),
            }],
            log_alpha: None,
        };
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, true);
        let x = g.constant(Tensor::zeros(1, 2));
        let tr = network::forward(&mut g, &nodes, None, x, 0.0, Mode::Eval, &mut rng::stream(0, "t")).unwrap();
        let j = network::input_jacobian(&mut g, &tr).unwrap();
        let l = robust_cross_entropy(&mut g, &tr, j, &[0], 0.1).unwrap();
        let expect = (1.0 + 0.2f64.exp()).ln();
        assert!((g.value(l).item() - expect).abs() < 1e-15);
        assert!((expect - 0.7981).abs() < 1e-4);
    }

    #[test]
    fn robust_rejects_negative_rho() {
        let p = MlpParams::<f64>::glorot(&[3, 2], 0).unwrap();
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, true);
        let x = g.constant(Tensor::zeros(1, 3));
        let tr = network::forward(&mut g, &nodes, None, x, 0.0, Mode::Eval, &mut rng::stream(0, "t")).unwrap();
        let j = network::input_jacobian(&mut g, &tr).unwrap();
        assert!(robust_cross_entropy(&mut g, &tr, j, &[0], -0.1).is_err());
    }

    fn cvar_min(losses: &[f64], a: usize) -> f64 {
        cvar_value(losses, cvar_optimal_theta(losses, a).unwrap(), a)
    }

    #[test]
    fn cvar_examples() {
        let l = [1., 2., 3., 4.];
        assert_eq!(cvar_min(&l, 4), 2.5);
        assert_eq!(cvar_min(&l, 1), 4.0);
        assert_eq!(cvar_min(&l, 2), 3.5);
    }

    #[test]
    fn cvar_graph_matches_plain_value() {
        let l = [0.3, 1.7, 0.9, 2.2, 0.1];
        let mut g = Graph::new();
        let ln = g.constant(Tensor::column(l.to_vec()));
        let th = g.param(Tensor::scalar(0.8));
        let v = cvar_wrap(&mut g, ln, th, 3).unwrap();
        assert!((g.value(v).item() - cvar_value(&l, 0.8, 3)).abs() < 1e-15);
        // d/dtheta = 1 - (#{l > theta}) / a = 1 - 3/3
        let grads = g.backward(v).unwrap();
        assert!(grads.get(th).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn cvar_rejects_bad_subset_size() {
        let mut g = Graph::<f64>::new();
        let ln = g.constant(Tensor::column(vec![1.0, 2.0]));
        let th = g.param(Tensor::scalar(0.0));
        assert!(cvar_wrap(&mut g, ln, th, 0).is_err());
        assert!(cvar_wrap(&mut g, ln, th, 3).is_err());
        assert!(cvar_optimal_theta(&[1.0], 2).is_err());
    }

    #[test]
    fn subset_size_rounding() {
        assert_eq!(subset_size(0.7, 128), 90);
        assert_eq!(subset_size(0.01, 5), 1);
        assert_eq!(subset_size(1.0, 5), 5);
    }

    #[test]
    fn variant_flags_and_names() {
        assert_eq!(Variant::ALL.iter().filter(|v| v.is_robust()).count(), 4);
        assert_eq!(Variant::ALL.iter().filter(|v| v.is_sparse()).count(), 4);
        assert_eq!(Variant::ALL.iter().filter(|v| v.is_stable()).count(), 4);
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
        }
        let s = Variant::Full.spec(0.01, 1e-6, 0.7, 0.0, GateConfig::default());
        assert!(s.is_robust() && s.is_sparse() && s.is_stable());
        let s = Variant::Nominal.spec(0.01, 1e-6, 0.7, 0.0, GateConfig::default());
        assert!(!s.is_robust() && !s.is_sparse() && !s.is_stable());
    }

    #[test]
    fn sparse_without_gates_is_an_error() {
        let p = MlpParams::<f64>::glorot(&[3, 2], 0).unwrap();
        let spec = Variant::Sparse.spec(0.0, 1e-3, 0.7, 0.0, GateConfig::default());
        let x = Tensor::zeros(2, 3);
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, true);
        let batch = Batch { x: &x, y: &[0, 1] };
        let err = compose(&mut g, &spec, &batch, &nodes, None, &ComposeOptions::default(), &mut rng::stream(0, "g"), &mut rng::stream(0, "d"));
        assert!(err.is_err());
    }
}
