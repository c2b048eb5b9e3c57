//! Feed-forward ReLU classifiers.
//!
//! Layer `l` maps `r_{l-1}` features to `r_l` with a weight matrix stored as
//! `r_{l-1} x r_l` (input-major), so a batch `X` of row vectors propagates as
//! `Z = H W + b`. Hidden layers use ReLU; the last layer produces logits.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::gates::{self, GateConfig};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub layers: Vec<Layer<T>>,
    /// One `log_alpha` per weight, same shapes as the weight matrices.
    /// Biases are never gated.
    pub log_alpha: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> MlpParams<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!("layer sizes must be >= 2 positive values, got {sizes:?}")));
        }
        let mut rng = rng::stream(seed, "init/weights");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Tensor::from_fn(fan_in, fan_out, |_, _| {
                    T::from_f64_lossy(rng.random_range(-limit..=limit))
                });
                Layer { weight, bias: Tensor::zeros(1, fan_out) }
            })
            .collect();
        Ok(Self { layers, log_alpha: None })
    }

    /// Adds gate parameters drawn around the default "mostly open" location.
    pub fn with_gates(mut self, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "init/log_alpha");
        self.log_alpha = Some(
            self.layers
                .iter()
                .map(|l| {
                    gates::init_log_alpha(
                        l.weight.rows(),
                        l.weight.cols(),
                        gates::INIT_LOG_ALPHA_MEAN,
                        gates::INIT_LOG_ALPHA_SD,
                        &mut rng,
                    )
                })
                .collect(),
        );
        self
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.cols()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn is_gated(&self) -> bool {
        self.log_alpha.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("network has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(shape_err(
                    "network",
                    format!("layer {i} outputs {} but layer {} expects {}", pair[0].weight.cols(), i + 1, pair[1].weight.rows()),
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != [1, l.weight.cols()] {
                return Err(shape_err("network", format!("bias {i} is {:?}", l.bias.shape())));
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite { what: format!("layer {i} parameters") });
            }
        }
        if let Some(la) = &self.log_alpha {
            if la.len() != self.layers.len()
                || la.iter().zip(&self.layers).any(|(a, l)| a.shape() != l.weight.shape())
            {
                return Err(shape_err("network", "gate parameters do not match weights".into()));
            }
        }
        Ok(())
    }

    /// Evaluation-time gate values (`None` for ungated networks).
    pub fn test_masks(&self, cfg: &GateConfig) -> Option<Vec<Tensor<T>>> {
        self.log_alpha
            .as_ref()
            .map(|la| la.iter().map(|a| gates::test_mask(a, cfg)).collect())
    }

    /// Registers weights, biases and gate parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamNodes {
        let mut leaf = |t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let weights = self.layers.iter().map(|l| leaf(&l.weight)).collect();
        let biases = self.layers.iter().map(|l| leaf(&l.bias)).collect();
        let log_alpha = self.log_alpha.as_ref().map(|la| la.iter().map(&mut leaf).collect());
        ParamNodes { weights, biases, log_alpha }
    }
}

/// Graph handles for one bound copy of [`MlpParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub log_alpha: Option<Vec<NodeId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub logits: NodeId,
    /// Weights actually used, `W~ * M` when masks were supplied.
    pub weights: Vec<NodeId>,
    /// Per hidden layer, the derivative of `h` with respect to `z`:
    /// the ReLU activation pattern times any dropout scaling. Batch x width.
    pub hidden_factors: Vec<Tensor<T>>,
    pub batch: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

/// Forward pass over a batch `x` (one example per row).
///
/// `masks`, when given, multiply the weights elementwise. Inverted dropout
/// with rate `dropout` is applied after each hidden ReLU in [`Mode::Train`].
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamNodes,
    masks: Option<&[NodeId]>,
    x: NodeId,
    dropout: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardTrace<T>> {
    if !(0.0..1.0).contains(&dropout) {
        return Err(invalid(format!("dropout rate must be in [0, 1), got {dropout}")));
    }
    let n_layers = params.weights.len();
    if n_layers == 0 || params.biases.len() != n_layers {
        return Err(invalid("parameter nodes are incomplete"));
    }
    let weights: Vec<NodeId> = match masks {
        Some(m) => {
            if m.len() != n_layers {
                return Err(shape_err("forward", format!("{} masks for {n_layers} layers", m.len())));
            }
            params.weights.iter().zip(m).map(|(&w, &m)| g.mul(w, m)).collect::<Result<_>>()?
        }
        None => params.weights.clone(),
    };

    let [batch, input_dim] = g.shape(x);
    let w0 = g.shape(weights[0]);
    if w0[0] != input_dim {
        return Err(shape_err("forward", format!("input {:?} against first weight {:?}", [batch, input_dim], w0)));
    }

    let keep = 1.0 - dropout;
    let mut h = x;
    let mut hidden_factors = Vec::with_capacity(n_layers - 1);
    for l in 0..n_layers {
        let z = g.matmul(h, weights[l])?;
        let z = g.add(z, params.biases[l])?;
        if l + 1 == n_layers {
            h = z;
            break;
        }
        let relu = g.relu(z)?;
        let zt = g.value(z);
        let mut factor = zt.map(|v| if v > T::zero() { T::one() } else { T::zero() });
        h = relu;
        if mode == Mode::Train && dropout > 0.0 {
            let scale = T::from_f64_lossy(1.0 / keep);
            let drop = Tensor::from_fn(zt.rows(), zt.cols(), |_, _| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            });
            factor = factor.zip_map(&drop, |a, b| a * b);
            let dn = g.constant(drop);
            h = g.mul(relu, dn)?;
        }
        hidden_factors.push(factor);
    }
    let num_classes = g.shape(h)[1];
    Ok(ForwardTrace { logits: h, weights, hidden_factors, batch, input_dim, num_classes })
}

/// Input Jacobian of the logits, one `K x M` block per example, stacked
/// into a `(B*K) x M` node (row `b*K + k` is the gradient of logit `k` of
/// example `b`). Activation patterns are constants; the result is
/// differentiable in the weights.
pub fn input_jacobian<T: Scalar>(g: &mut Graph<T>, trace: &ForwardTrace<T>) -> Result<NodeId> {
    let n_layers = trace.weights.len();
    if trace.hidden_factors.len() + 1 != n_layers {
        return Err(shape_err(
            "input_jacobian",
            format!("{} activation patterns for {n_layers} layers", trace.hidden_factors.len()),
        ));
    }
    let (b, k) = (trace.batch, trace.num_classes);
    for (l, f) in trace.hidden_factors.iter().enumerate() {
        let w = g.shape(trace.weights[l]);
        if f.rows() != b || f.cols() != w[1] {
            return Err(shape_err("input_jacobian", format!("pattern {l} is {:?}, weight {:?}", f.shape(), w)));
        }
    }
    // Row (b, k) starts as e_k, then walks back through the layers.
    let selector = Tensor::from_fn(b * k, k, |r, c| if r % k == c { T::one() } else { T::zero() });
    let mut rows = g.constant(selector);
    for l in (0..n_layers).rev() {
        rows = g.matmul_nt(rows, trace.weights[l])?;
        if l > 0 {
            let f = &trace.hidden_factors[l - 1];
            let expanded = Tensor::from_fn(b * k, f.cols(), |r, c| f.get(r / k, c));
            let fnode = g.constant(expanded);
            rows = g.mul(rows, fnode)?;
        }
    }
    Ok(rows)
}

/// Frozen network with evaluation-time gates folded into the weights.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(params: &MlpParams<T>, gate_cfg: &GateConfig) -> Self {
        let weights = match params.test_masks(gate_cfg) {
            Some(masks) => params
                .layers
                .iter()
                .zip(&masks)
                .map(|(l, m)| l.weight.zip_map(m, |w, m| w * m))
                .collect(),
            None => params.layers.iter().map(|l| l.weight.clone()).collect(),
        };
        let biases = params.layers.iter().map(|l| l.bias.clone()).collect();
        Self { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.last().map_or(0, |w| w.cols())
    }

    /// Deterministic logits, no graph.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.input_dim() {
            return Err(shape_err("logits", format!("input {:?}, expected {} columns", x.shape(), self.input_dim())));
        }
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w)?;
            let cols = z.cols();
            let bias = b.as_slice();
            for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
                *v = *v + bias[i % cols];
                if l < last && *v <= T::zero() {
                    *v = T::zero();
                }
            }
            h = z;
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|r| argmax(z.row_slice(r))).collect())
    }

    /// Binds the frozen weights as graph constants.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamNodes {
        ParamNodes {
            weights: self.weights.iter().map(|w| g.constant(w.clone())).collect(),
            biases: self.biases.iter().map(|b| g.constant(b.clone())).collect(),
            log_alpha: None,
        }
    }
}

/// First index of the maximum; ties go to the lowest class.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT: &str = "rss-model";
pub const MODEL_VERSION: u32 = 1;

/// On-disk model container (JSON). See `docs/formats.md`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub precision: String,
    pub layer_sizes: Vec<usize>,
    pub gate: Option<GateConfig>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    /// Row-major `r_{l-1} x r_l`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub log_alpha: Option<Vec<f64>>,
}

impl ModelFile {
    pub fn from_params<T: Scalar>(params: &MlpParams<T>, gate: Option<GateConfig>) -> Self {
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerRecord {
                weight: l.weight.to_f64_vec(),
                bias: l.bias.to_f64_vec(),
                log_alpha: params.log_alpha.as_ref().map(|la| la[i].to_f64_vec()),
            })
            .collect();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            precision: T::NAME.into(),
            layer_sizes: params.layer_sizes(),
            gate: if params.is_gated() { gate } else { None },
            layers,
        }
    }

    pub fn to_params<T: Scalar>(&self) -> Result<MlpParams<T>> {
        let bad = |m: String| Error::Format { path: Default::default(), message: m };
        if self.format != MODEL_FORMAT {
            return Err(bad(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(bad(format!("unsupported model version {}", self.version)));
        }
        if self.layer_sizes.len() != self.layers.len() + 1 {
            return Err(bad("layer_sizes does not match the number of layers".into()));
        }
        let mut layers = Vec::new();
        let mut gated = Vec::new();
        for (i, rec) in self.layers.iter().enumerate() {
            let (r, c) = (self.layer_sizes[i], self.layer_sizes[i + 1]);
            layers.push(Layer { weight: Tensor::from_f64(r, c, &rec.weight)?, bias: Tensor::from_f64(1, c, &rec.bias)? });
            if let Some(la) = &rec.log_alpha {
                gated.push(Tensor::from_f64(r, c, la)?);
            }
        }
        let log_alpha = match gated.len() {
            0 => None,
            n if n == layers.len() => Some(gated),
            _ => return Err(bad("gate parameters present on only some layers".into())),
        };
        let params = MlpParams { layers, log_alpha };
        params.validate()?;
        Ok(params)
    }
}

pub fn save_model<T: Scalar>(path: &Path, params: &MlpParams<T>, gate: Option<GateConfig>) -> Result<()> {
    let file = ModelFile::from_params(params, gate);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, &file)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(MlpParams<T>, Option<GateConfig>)> {
    let text = fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    let params = file.to_params().map_err(|e| match e {
        Error::Format { message, .. } => Error::Format { path: path.to_path_buf(), message },
        other => other,
    })?;
    Ok((params, file.gate))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Example network where matrices are written as `z = W x`; stored transposed.
    fn example_params() -> MlpParams<f64> {
        let w1 = Tensor::from_f64(2, 2, &[1., -1., 2., 0.]).unwrap().transpose();
        let w2 = Tensor::from_f64(1, 2, &[1., 1.]).unwrap().transpose();
        MlpParams {
            layers: vec![
                Layer { weight: w1, bias: Tensor::zeros(1, 2) },
                Layer { weight: w2, bias: Tensor::zeros(1, 1) },
            ],
            log_alpha: None,
        }
    }

    fn run_forward(p: &MlpParams<f64>, x: &[f64], dropout: f64, mode: Mode, seed: u64) -> (Graph<f64>, ForwardTrace<f64>) {
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, true);
        let xn = g.constant(Tensor::from_f64(1, x.len(), x).unwrap());
        let mut r = rng::stream(seed, "test");
        let tr = forward(&mut g, &nodes, None, xn, dropout, mode, &mut r).unwrap();
        (g, tr)
    }

    #[test]
    fn hand_evaluated_forward() {
        let (g, tr) = run_forward(&example_params(), &[1., 1.], 0.0, Mode::Eval, 0);
        assert_eq!(g.value(tr.logits).as_slice(), &[2.0]);
        assert_eq!(tr.hidden_factors[0].as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn hand_evaluated_jacobian() {
        let (mut g, tr) = run_forward(&example_params(), &[1., 1.], 0.0, Mode::Eval, 0);
        let j = input_jacobian(&mut g, &tr).unwrap();
        assert_eq!(g.value(j).as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_jacobian_is_the_weight() {
        // z = W x with W 3x4, stored as 4x3
        let w = Tensor::<f64>::from_fn(3, 4, |r, c| (r as f64) - 0.5 * c as f64 + 0.25);
        let p = MlpParams { layers: vec![Layer { weight: w.transpose(), bias: Tensor::zeros(1, 3) }], log_alpha: None };
        let (mut g, tr) = run_forward(&p, &[0.1, 0.2, -0.3, 0.4], 0.0, Mode::Eval, 0);
        let j = input_jacobian(&mut g, &tr).unwrap();
        assert_eq!(g.value(j), &w);
    }

    #[test]
    fn zero_masks_leave_only_biases() {
        let p = MlpParams::<f64>::glorot(&[4, 3, 2], 1).unwrap();
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, true);
        let masks: Vec<NodeId> = p.layers.iter().map(|l| g.constant(Tensor::zeros(l.weight.rows(), l.weight.cols()))).collect();
        let x = g.constant(Tensor::full(2, 4, 0.7));
        let tr = forward(&mut g, &nodes, Some(&masks), x, 0.0, Mode::Eval, &mut rng::stream(0, "t")).unwrap();
        assert!(g.value(tr.logits).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let p = MlpParams::<f64>::glorot(&[5, 6, 3], 3).unwrap();
        let (g1, t1) = run_forward(&p, &[0.1, -0.2, 0.3, 0.5, -1.0], 0.0, Mode::Train, 11);
        let (g2, t2) = run_forward(&p, &[0.1, -0.2, 0.3, 0.5, -1.0], 0.0, Mode::Eval, 12);
        assert_eq!(g1.value(t1.logits), g2.value(t2.logits));
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let p = MlpParams::<f64>::glorot(&[4, 3], 99).unwrap();
        let limit = (6.0f64 / 7.0).sqrt();
        assert!(p.layers[0].weight.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(p.layers[0].bias.as_slice().iter().all(|&b| b == 0.0));
        assert_eq!(p, MlpParams::<f64>::glorot(&[4, 3], 99).unwrap());
        assert_ne!(p, MlpParams::<f64>::glorot(&[4, 3], 100).unwrap());
    }

    #[test]
    fn glorot_rejects_bad_sizes() {
        assert!(MlpParams::<f32>::glorot(&[], 0).is_err());
        assert!(MlpParams::<f32>::glorot(&[3], 0).is_err());
        assert!(MlpParams::<f32>::glorot(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let p = MlpParams::<f64>::glorot(&[4, 3, 2], 1).unwrap();
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, true);
        let x = g.constant(Tensor::zeros(2, 5));
        assert!(forward(&mut g, &nodes, None, x, 0.0, Mode::Eval, &mut rng::stream(0, "t")).is_err());
    }

    #[test]
    fn classifier_matches_graph_forward() {
        let p = MlpParams::<f64>::glorot(&[5, 7, 4, 3], 5).unwrap().with_gates(5);
        let cfg = GateConfig::default();
        let clf = Classifier::new(&p, &cfg);
        let x = Tensor::<f64>::from_fn(3, 5, |r, c| (r as f64 - c as f64) * 0.3);
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, false);
        let masks: Vec<NodeId> = p.test_masks(&cfg).unwrap().into_iter().map(|m| g.constant(m)).collect();
        let xn = g.constant(x.clone());
        let tr = forward(&mut g, &nodes, Some(&masks), xn, 0.0, Mode::Eval, &mut rng::stream(0, "t")).unwrap();
        let direct = clf.logits(&x).unwrap();
        for (a, b) in g.value(tr.logits).as_slice().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = MlpParams::<f32>::glorot(&[6, 5, 3], 8).unwrap().with_gates(8);
        save_model(&path, &p, Some(GateConfig::default())).unwrap();
        let (q, gate) = load_model::<f32>(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(gate, Some(GateConfig::default()));
    }

    #[test]
    fn model_file_rejects_wrong_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = MlpParams::<f64>::glorot(&[2, 2], 1).unwrap();
        let mut file = ModelFile::from_params(&p, None);
        file.format = "other".into();
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(load_model::<f64>(&path), Err(Error::Format { .. })));
    }
}
