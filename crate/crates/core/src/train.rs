//! Adam training loop with periodic validation and best-checkpoint selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::autodiff::{Graph, Scalar, Tensor};
use crate::data::{self, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::gates::expected_l0;
use crate::losses::{compose, Batch, ComposeOptions, GateSampling, LossSpec};
use crate::metrics::{self, MetricBundle};
use crate::network::{Classifier, MlpParams, Mode};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every parameter, in registration order.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// One parameter handed to [`adam_step`].
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies (weights only).
    pub decay: bool,
}

/// Bias-corrected Adam update. Weight decay enters as `weight_decay * p`
/// added to the gradient of decayed slots.
pub fn adam_step<T: Scalar>(
    slots: &mut [ParamSlot<'_, T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for s in slots.iter() {
        if s.grad.shape() != s.value.shape() {
            return Err(crate::error::shape_err("adam_step", format!("{}: grad {:?}, value {:?}", s.name, s.grad.shape(), s.value.shape())));
        }
        if !s.grad.all_finite() {
            return Err(Error::NonFinite { what: format!("gradient of {}", s.name) });
        }
    }
    if state.m.is_empty() {
        state.m = slots.iter().map(|s| Tensor::zeros(s.value.rows(), s.value.cols())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != slots.len() {
        return Err(invalid(format!("optimizer state has {} slots, got {}", state.m.len(), slots.len())));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let step = T::from_f64_lossy(lr / c1);
    let inv_c2 = T::from_f64_lossy(1.0 / c2);
    let eps = T::from_f64_lossy(cfg.eps);
    let wd = T::from_f64_lossy(weight_decay);
    for ((slot, m), v) in slots.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let decay = slot.decay && weight_decay != 0.0;
        let p = slot.value.as_mut_slice();
        let g = slot.grad.as_slice();
        for (i, ((pi, mi), vi)) in p.iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).enumerate() {
            let gi = if decay { g[i] + wd * *pi } else { g[i] };
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            *pi = *pi - step * *mi / ((*vi * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub validation_period: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub loss: LossSpec,
    pub seed: u64,
    #[serde(default)]
    pub gate_sampling: GateSampling,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(hidden: Vec<usize>, learning_rate: f64, loss: LossSpec, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size: 128,
            max_iterations: 50_000,
            validation_period: 1000,
            hidden,
            dropout: 0.0,
            loss,
            seed,
            gate_sampling: GateSampling::PerBatch,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.validation_period == 0 {
            return Err(invalid("batch size and validation period must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid(format!("hidden sizes must be positive, got {:?}", self.hidden)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.loss.validate()
    }

    pub fn layer_sizes(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(input);
        s.extend_from_slice(&self.hidden);
        s.push(classes);
        s
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: MlpParams<T>,
    pub theta: Option<f64>,
    pub iteration: usize,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Mean training objective since the previous validation point.
    pub train_loss: Option<f64>,
    pub val_acc: f64,
    pub expected_l0: Option<f64>,
    pub theta: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    pub best: Checkpoint<T>,
    pub history: Vec<HistoryRow>,
}

/// Validation accuracy with deterministic gates and no dropout.
pub fn validation_accuracy<T: Scalar>(params: &MlpParams<T>, cfg: &LossSpec, x: &Tensor<T>, y: &[usize]) -> Result<f64> {
    let model = Classifier::new(params, &cfg.gate);
    metrics::natural_accuracy(&model, x, y)
}

/// Trains on `split.train` and keeps the parameters with the best
/// validation accuracy (earliest on ties). `data` should already be
/// normalized.
pub fn fit<T: Scalar>(data: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    let sizes = cfg.layer_sizes(data.m, data.num_classes());
    let mut params = MlpParams::<T>::glorot(&sizes, cfg.seed)?;
    if cfg.loss.is_sparse() {
        params = params.with_gates(cfg.seed);
    }
    let mut theta: Option<Tensor<T>> = cfg.loss.is_stable().then(|| Tensor::scalar(T::zero()));

    let x_val = data.features::<T>(&split.val);
    let y_val = data.labels(&split.val);
    let mut order = split.train.clone();
    let mut batch_rng = rng::stream(cfg.seed, "train/batches");
    let mut gate_rng = rng::stream(cfg.seed, "train/gates");
    let mut dropout_rng = rng::stream(cfg.seed, "train/dropout");
    order.shuffle(&mut batch_rng);
    let mut cursor = 0;
    let bs = cfg.batch_size.min(order.len());
    let opts = ComposeOptions { dropout: cfg.dropout, mode: Mode::Train, gate_sampling: cfg.gate_sampling };

    let mut state = AdamState::default();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint<T>> = None;
    let mut window = (0.0, 0usize);

    let mut record = |it: usize, params: &MlpParams<T>, theta: &Option<Tensor<T>>, window: &mut (f64, usize), best: &mut Option<Checkpoint<T>>| -> Result<()> {
        let val_acc = validation_accuracy(params, &cfg.loss, &x_val, &y_val)?;
        let theta_v = theta.as_ref().map(|t| t.item().to_f64_lossy());
        history.push(HistoryRow {
            iteration: it,
            train_loss: (window.1 > 0).then(|| window.0 / window.1 as f64),
            val_acc,
            expected_l0: params.log_alpha.as_ref().map(|la| expected_l0(la, &cfg.loss.gate)),
            theta: theta_v,
        });
        *window = (0.0, 0);
        if best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
            *best = Some(Checkpoint { params: params.clone(), theta: theta_v, iteration: it, val_acc });
        }
        Ok(())
    };

    for it in 0..cfg.max_iterations {
        if it % cfg.validation_period == 0 {
            record(it, &params, &theta, &mut window, &mut best)?;
        }
        if cursor + bs > order.len() {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let xb = data.features::<T>(idx);
        let yb = data.labels(idx);

        let mut g = Graph::new();
        let nodes = params.bind(&mut g, true);
        let theta_node = theta.as_ref().map(|t| g.param(t.clone()));
        let obj = compose(&mut g, &cfg.loss, &Batch { x: &xb, y: &yb }, &nodes, theta_node, &opts, &mut gate_rng, &mut dropout_rng)?;
        let loss = g.value(obj.loss).item().to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: format!("training loss at iteration {it}") });
        }
        window.0 += loss;
        window.1 += 1;
        let grads = g.backward(obj.loss)?;

        let mut slots = Vec::new();
        let n_layers = params.layers.len();
        let la_nodes = nodes.log_alpha.clone();
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let gw = grads.get_or_zeros(nodes.weights[l], layer.weight.rows(), layer.weight.cols());
            let gb = grads.get_or_zeros(nodes.biases[l], 1, layer.bias.cols());
            slots.push(ParamSlot { name: format!("weight[{l}]"), value: &mut layer.weight, grad: gw, decay: true });
            slots.push(ParamSlot { name: format!("bias[{l}]"), value: &mut layer.bias, grad: gb, decay: false });
        }
        if let (Some(las), Some(la_nodes)) = (params.log_alpha.as_mut(), la_nodes) {
            for (l, (la, node)) in las.iter_mut().zip(la_nodes).enumerate().take(n_layers) {
                let gl = grads.get_or_zeros(node, la.rows(), la.cols());
                slots.push(ParamSlot { name: format!("log_alpha[{l}]"), value: la, grad: gl, decay: false });
            }
        }
        if let (Some(t), Some(node)) = (theta.as_mut(), theta_node) {
            let gt = grads.get_or_zeros(node, 1, 1);
            slots.push(ParamSlot { name: "theta".into(), value: t, grad: gt, decay: false });
        }
        adam_step(&mut slots, &mut state, &cfg.adam, cfg.learning_rate, cfg.loss.weight_decay)?;
    }
    record(cfg.max_iterations, &params, &theta, &mut window, &mut best)?;
    Ok(FitOutcome { best: best.expect("at least one validation point"), history })
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    history_csv(std::fs::File::create(path)?, rows)
}

// ---------------------------------------------------------------------------
// Multi-seed runs
// ---------------------------------------------------------------------------

/// What to do with each trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Z-score features with training statistics.
    pub normalize: bool,
    pub radii: Vec<f64>,
    pub attack: AttackConfig,
}

#[derive(Clone, Debug)]
pub struct SeedRun<T> {
    pub seed: u64,
    pub metrics: MetricBundle,
    /// Test-set predictions, used for the ensemble stability score.
    pub predictions: Vec<usize>,
    pub best_iteration: usize,
    pub val_acc: f64,
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<HistoryRow>,
}

/// Trains one seed: train and validation rows are redrawn from `base` with
/// the seed while its test rows stay fixed; initialization uses the seed.
pub fn run_seed<T: Scalar>(data: &Dataset, base: &Split, cfg: &TrainConfig, seed: u64, plan: &EvalPlan) -> Result<SeedRun<T>> {
    let split = data::resplit_train_val(base, &data.y, seed);
    let prepared;
    let data = if plan.normalize {
        prepared = data::normalize(data, &split).0;
        &prepared
    } else {
        data
    };
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let out = fit::<T>(data, &split, &cfg)?;
    let x_test = data.features::<T>(&split.test);
    let y_test = data.labels(&split.test);
    let attack = AttackConfig { seed, ..plan.attack.clone() };
    let metrics = metrics::evaluate(&out.best.params, &cfg.loss.gate, &x_test, &y_test, &plan.radii, &attack)?;
    let predictions = Classifier::new(&out.best.params, &cfg.loss.gate).predict(&x_test)?;
    Ok(SeedRun {
        seed,
        metrics,
        predictions,
        best_iteration: out.best.iteration,
        val_acc: out.best.val_acc,
        checkpoint: out.best,
        history: out.history,
    })
}

/// Mean metrics over seeds plus the stability score of their test
/// predictions (when there are at least two).
pub fn aggregate(metrics: &[&MetricBundle], predictions: &[Vec<usize>], num_classes: usize) -> Result<MetricBundle> {
    if metrics.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let n = metrics.len() as f64;
    let mut adv: BTreeMap<String, f64> = BTreeMap::new();
    for m in metrics {
        for (k, v) in &m.adv_acc {
            *adv.entry(k.clone()).or_default() += v / n;
        }
    }
    let stability_score = if predictions.len() >= 2 { Some(metrics::stability_score(predictions, num_classes)?) } else { None };
    Ok(MetricBundle {
        natural_acc: metrics.iter().map(|m| m.natural_acc).sum::<f64>() / n,
        adv_acc: adv,
        sparsity: metrics.iter().map(|m| m.sparsity).sum::<f64>() / n,
        stability_score,
    })
}

#[derive(Clone, Debug)]
pub struct MultiSeed<T> {
    pub runs: Vec<SeedRun<T>>,
    pub aggregate: MetricBundle,
}

/// Runs every seed against the same base split.
pub fn multi_seed<T: Scalar>(data: &Dataset, base: &Split, cfg: &TrainConfig, seeds: &[u64], plan: &EvalPlan) -> Result<MultiSeed<T>> {
    if seeds.is_empty() {
        return Err(invalid("seed list is empty"));
    }
    let runs: Vec<SeedRun<T>> = seeds.iter().map(|&s| run_seed(data, base, cfg, s, plan)).collect::<Result<_>>()?;
    let bundles: Vec<&MetricBundle> = runs.iter().map(|r| &r.metrics).collect();
    let preds: Vec<Vec<usize>> = runs.iter().map(|r| r.predictions.clone()).collect();
    let aggregate = aggregate(&bundles, &preds, data.num_classes())?;
    Ok(MultiSeed { runs, aggregate })
}

/// Writes the history as CSV to any writer.
pub fn history_csv<W: Write>(out: W, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "train_loss", "val_acc", "expected_l0", "theta"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    for r in rows {
        w.write_record([r.iteration.to_string(), opt(r.train_loss), format!("{}", r.val_acc), opt(r.expected_l0), opt(r.theta)])?;
    }
    w.flush()?;
    Ok(())
}
