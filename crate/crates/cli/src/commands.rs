//! Single-run subcommands: `train`, `attack-eval` and `stability`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use rss_core::data;
use rss_core::losses::Variant;
use rss_core::metrics::{self, MetricBundle};
use rss_core::network::{load_model, save_model};
use rss_core::train::{self, EvalPlan};
use rss_core::Scalar;

use crate::grid::{expand_grid, RunSpec};
use crate::records::{write_json, Precision};
use crate::sweep::Experiment;

/// Picks one grid point: the `index`-th among those of `variant` (or of the
/// whole grid when no variant is given).
pub fn pick_spec(exp: &Experiment, variant: Option<Variant>, index: usize) -> Result<RunSpec> {
    let specs: Vec<RunSpec> = expand_grid(&exp.cfg)?.into_iter().filter(|s| variant.is_none_or(|v| s.variant == v)).collect();
    let n = specs.len();
    match specs.into_iter().nth(index) {
        Some(s) => Ok(s),
        None if n == 0 => bail!("no grid point for the requested variant"),
        None => bail!("grid index {index} out of range ({n} points)"),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    fingerprint: String,
    variant: Variant,
    seed: u64,
    best_iteration: usize,
    val_acc: f64,
    metrics: &'a MetricBundle,
}

fn train_typed<T: Scalar>(exp: &Experiment, spec: &RunSpec, seed: u64, precision: Precision, out: &Path) -> Result<MetricBundle> {
    let run = exp.run_seed::<T>(spec, seed)?;
    let gate = spec.train.loss.is_sparse().then_some(spec.train.loss.gate);
    save_model(&out.join("model.json"), &run.checkpoint.params, gate)?;
    train::write_history(&out.join("history.csv"), &run.history)?;
    let summary = TrainSummary {
        fingerprint: spec.fingerprint(&exp.cfg, precision.as_str()),
        variant: spec.variant,
        seed,
        best_iteration: run.best_iteration,
        val_acc: run.val_acc,
        metrics: &run.metrics,
    };
    write_json(&out.join("metrics.json"), &summary)?;
    Ok(run.metrics)
}

/// Trains one configuration and writes `model.json`, `history.csv` and
/// `metrics.json` into `out`.
pub fn train(exp: &Experiment, spec: &RunSpec, seed: u64, precision: Precision, out: &Path) -> Result<MetricBundle> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match precision {
        Precision::F32 => train_typed::<f32>(exp, spec, seed, precision, out),
        Precision::F64 => train_typed::<f64>(exp, spec, seed, precision, out),
    }
}

fn attack_typed<T: Scalar>(exp: &Experiment, model: &Path, seed: u64, radii: &[f64]) -> Result<MetricBundle> {
    let (params, gate) = load_model::<T>(model).with_context(|| format!("loading {}", model.display()))?;
    let split = data::resplit_train_val(&exp.split, &exp.data.y, seed);
    let prepared;
    let data = if exp.cfg.dataset.normalize() {
        prepared = data::normalize(&exp.data, &split).0;
        &prepared
    } else {
        &exp.data
    };
    let x = data.features::<T>(&split.test);
    let y = data.labels(&split.test);
    let attack = rss_core::attacks::AttackConfig { seed, ..exp.cfg.attack.base() };
    let gate = gate.unwrap_or(exp.cfg.gate);
    Ok(metrics::evaluate(&params, &gate, &x, &y, radii, &attack)?)
}

/// Evaluates a saved model on the test rows of the run with `seed`.
pub fn attack_eval(exp: &Experiment, model: &Path, seed: u64, radii: &[f64], precision: Precision) -> Result<MetricBundle> {
    match precision {
        Precision::F32 => attack_typed::<f32>(exp, model, seed, radii),
        Precision::F64 => attack_typed::<f64>(exp, model, seed, radii),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityResult {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Ensemble score over the seeds' test predictions; 0 is perfectly stable.
    pub stability_score: f64,
    pub natural_acc: Vec<f64>,
    pub aggregate: MetricBundle,
}

fn stability_typed<T: Scalar>(exp: &Experiment, spec: &RunSpec, plan: &EvalPlan) -> Result<StabilityResult> {
    let res = train::multi_seed::<T>(&exp.data, &exp.split, &spec.train, &exp.cfg.seeds, plan)?;
    Ok(StabilityResult {
        variant: spec.variant,
        seeds: exp.cfg.seeds.clone(),
        stability_score: res.aggregate.stability_score.context("stability score missing for a multi-seed run")?,
        natural_acc: res.runs.iter().map(|r| r.metrics.natural_acc).collect(),
        aggregate: res.aggregate,
    })
}

/// Trains one configuration on every configured seed and scores the
/// agreement of their test predictions.
pub fn stability(exp: &Experiment, spec: &RunSpec, precision: Precision) -> Result<StabilityResult> {
    if exp.cfg.seeds.len() < 2 {
        bail!("the stability score needs at least two seeds");
    }
    let plan = EvalPlan { radii: Vec::new(), ..exp.plan() };
    match precision {
        Precision::F32 => stability_typed::<f32>(exp, spec, &plan),
        Precision::F64 => stability_typed::<f64>(exp, spec, &plan),
    }
}
