//! Reference oracles shared by the integration tests: central finite
//! differences, brute-force subset maxima, and small random problems.

#![allow(dead_code)]

use rand::Rng as _;
use rss_core::gates::GateConfig;
use rss_core::losses::{compose, Batch, ComposeOptions, LossSpec};
use rss_core::network::{Layer, MlpParams};
use rss_core::{rng, Graph, Tensor};

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|)`; pairs that are both
/// exactly zero count as equal.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.abs().max(y.abs());
            if d == 0.0 {
                0.0
            } else {
                (x - y).abs() / d
            }
        })
        .fold(0.0, f64::max)
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both are zero.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let d = norm(a).max(norm(b));
    if d == 0.0 {
        0.0
    } else {
        diff / d
    }
}

/// Largest mean over all size-`a` subsets, by enumeration.
pub fn brute_force_subset_max(losses: &[f64], a: usize) -> f64 {
    let n = losses.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a {
            continue;
        }
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| losses[i]).sum();
        best = best.max(s / a as f64);
    }
    best
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
}

/// Glorot weights with non-zero random biases, gated when asked.
pub fn random_net(sizes: &[usize], seed: u64, gated: bool) -> MlpParams<f64> {
    let mut p = MlpParams::<f64>::glorot(sizes, seed).unwrap();
    let mut r = rng::stream(seed, "test/biases");
    for Layer { bias, .. } in &mut p.layers {
        *bias = random_tensor(1, bias.cols(), 0.3, &mut r);
    }
    if gated {
        p = p.with_gates(seed);
        // Spread the gate locations so both clamped and interior gates occur.
        for la in p.log_alpha.as_mut().unwrap() {
            for v in la.as_mut_slice() {
                *v = r.random_range(-1.5..2.5);
            }
        }
    }
    p
}

/// A fixed objective over flattened parameters, for gradient checks.
/// Gate noise is replayed from the same seed on every evaluation.
pub struct Problem {
    pub spec: LossSpec,
    pub params: MlpParams<f64>,
    pub theta: Option<f64>,
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
    pub noise_seed: u64,
}

impl Problem {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.params.layers {
            v.extend_from_slice(l.weight.as_slice());
            v.extend_from_slice(l.bias.as_slice());
        }
        if let Some(las) = &self.params.log_alpha {
            for la in las {
                v.extend_from_slice(la.as_slice());
            }
        }
        v.extend(self.theta);
        v
    }

    pub fn with_flat(&self, v: &[f64]) -> MlpParams<f64> {
        let mut p = self.params.clone();
        let mut at = 0;
        let mut take = |t: &mut Tensor<f64>| {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&v[at..at + n]);
            at += n;
        };
        for l in &mut p.layers {
            take(&mut l.weight);
            take(&mut l.bias);
        }
        if let Some(las) = &mut p.log_alpha {
            las.iter_mut().for_each(&mut take);
        }
        p
    }

    /// Objective value and its gradient in `flatten` order.
    pub fn eval(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let params = self.with_flat(v);
        let theta = self.theta.map(|_| *v.last().unwrap());
        let mut g = Graph::new();
        let nodes = params.bind(&mut g, true);
        let theta_node = theta.map(|t| g.param(Tensor::scalar(t)));
        let mut gate_rng = rng::stream(self.noise_seed, "test/gates");
        let mut drop_rng = rng::stream(self.noise_seed, "test/dropout");
        let obj = compose(
            &mut g,
            &self.spec,
            &Batch { x: &self.x, y: &self.y },
            &nodes,
            theta_node,
            &ComposeOptions::default(),
            &mut gate_rng,
            &mut drop_rng,
        )
        .unwrap();
        let value = g.value(obj.loss).item();
        let grads = g.backward(obj.loss).unwrap();
        let mut out = Vec::new();
        for (l, layer) in params.layers.iter().enumerate() {
            out.extend(grads.get_or_zeros(nodes.weights[l], layer.weight.rows(), layer.weight.cols()).into_vec());
            out.extend(grads.get_or_zeros(nodes.biases[l], 1, layer.bias.cols()).into_vec());
        }
        if let (Some(las), Some(la_nodes)) = (&params.log_alpha, &nodes.log_alpha) {
            for (la, &n) in las.iter().zip(la_nodes) {
                out.extend(grads.get_or_zeros(n, la.rows(), la.cols()).into_vec());
            }
        }
        if let Some(n) = theta_node {
            out.push(grads.get_or_zeros(n, 1, 1).item());
        }
        (value, out)
    }

    /// Names and lengths of the parameter tensors, in `flatten` order.
    pub fn tensors(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (l, layer) in self.params.layers.iter().enumerate() {
            out.push((format!("W{l}"), layer.weight.len()));
            out.push((format!("b{l}"), layer.bias.len()));
        }
        if let Some(las) = &self.params.log_alpha {
            out.extend(las.iter().enumerate().map(|(l, la)| (format!("log_alpha{l}"), la.len())));
        }
        if self.theta.is_some() {
            out.push(("theta".into(), 1));
        }
        out
    }

    /// Analytic and central-difference gradients at the stored point.
    pub fn gradients(&self, h: f64) -> (Vec<f64>, Vec<f64>) {
        let v = self.flatten();
        let (_, analytic) = self.eval(&v);
        let numeric = central_diff(|p| self.eval(p).0, &v, h);
        (analytic, numeric)
    }

    /// Worst per-tensor relative error `|a - n|_2 / max(|a|_2, |n|_2)` and
    /// the tensor it occurs in.
    pub fn gradient_error(&self, h: f64) -> (f64, String) {
        let (a, n) = self.gradients(h);
        let mut worst = (0.0, String::new());
        let mut at = 0;
        for (name, len) in self.tensors() {
            let err = norm_rel_err(&a[at..at + len], &n[at..at + len]);
            if err >= worst.0 {
                worst = (err, name);
            }
            at += len;
        }
        worst
    }
}

/// A random objective of the given kind on a `sizes` network.
pub fn random_problem(spec: LossSpec, sizes: &[usize], batch: usize, seed: u64) -> Problem {
    let mut r = rng::stream(seed, "test/problem");
    let params = random_net(sizes, seed, spec.is_sparse());
    let x = random_tensor(batch, sizes[0], 1.0, &mut r);
    let k = *sizes.last().unwrap();
    let y = (0..batch).map(|_| r.random_range(0..k)).collect();
    let theta = spec.is_stable().then(|| r.random_range(0.2..1.5));
    Problem { spec, params, theta, x, y, noise_seed: seed }
}

pub fn default_gate() -> GateConfig {
    GateConfig::default()
}

/// Per-example plain and linearized robust cross-entropy in eval mode.
pub fn ce_pair(params: &MlpParams<f64>, x: &Tensor<f64>, y: &[usize], rho: f64) -> (Vec<f64>, Vec<f64>) {
    use rss_core::losses::{cross_entropy, robust_cross_entropy};
    use rss_core::network::{forward, input_jacobian, Mode};
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let xn = g.constant(x.clone());
    let mut unused = rng::stream(0, "test/unused");
    let trace = forward(&mut g, &nodes, None, xn, 0.0, Mode::Eval, &mut unused).unwrap();
    let jac = input_jacobian(&mut g, &trace).unwrap();
    let ce = cross_entropy(&mut g, trace.logits, y).unwrap();
    let rce = robust_cross_entropy(&mut g, &trace, jac, y, rho).unwrap();
    (g.value(ce).as_slice().to_vec(), g.value(rce).as_slice().to_vec())
}
