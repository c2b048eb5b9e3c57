//! Parallel, resumable execution of every (grid point, seed) pair.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;

use rss_core::data::{self, Dataset, Split};
use rss_core::network::save_model;
use rss_core::train::{self, EvalPlan, SeedRun};
use rss_core::Scalar;

use crate::config::ExperimentConfig;
use crate::grid::{expand_grid, RunSpec};
use crate::records::{
    self, history_path, model_path, record_path, seed_record_path, write_json, DatasetInfo, Precision, RunRecord,
    SeedOutcome, SeedRecord, SeedSummary,
};
use crate::report::{self, SelectBy};

/// A loaded dataset with its shared split.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub split: Split,
    pub info: DatasetInfo,
}

impl Experiment {
    /// `base_dir` resolves relative dataset paths.
    pub fn load(cfg: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        let data = cfg.dataset.load(base_dir)?;
        let split = data::split(&data.y, cfg.split_seed)?;
        if !split.stratified {
            eprintln!("warning: a class has fewer than 3 rows; using an unstratified split");
        }
        let info = DatasetInfo { name: cfg.name.clone(), rows: data.n, features: data.m, classes: data.num_classes() };
        Ok(Self { cfg, data, split, info })
    }

    pub fn plan(&self) -> EvalPlan {
        EvalPlan { normalize: self.cfg.dataset.normalize(), radii: self.cfg.attack.radii.clone(), attack: self.cfg.attack.base() }
    }

    pub fn run_seed<T: Scalar>(&self, spec: &RunSpec, seed: u64) -> Result<SeedRun<T>> {
        Ok(train::run_seed::<T>(&self.data, &self.split, &spec.train, seed, &self.plan())?)
    }
}

pub struct SweepOptions {
    pub out: PathBuf,
    pub jobs: usize,
    pub precision: Precision,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub configs: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn completed(path: &Path) -> bool {
    matches!(records::read_json::<SeedRecord>(path), Ok(SeedRecord { outcome: SeedOutcome::Ok { .. }, .. }))
}

fn execute<T: Scalar>(exp: &Experiment, spec: &RunSpec, fingerprint: &str, seed: u64, out: &Path) -> Result<SeedOutcome> {
    let run = exp.run_seed::<T>(spec, seed)?;
    let model = model_path(out, fingerprint, seed);
    if let Some(dir) = model.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_model(&model, &run.checkpoint.params, spec.train.loss.is_sparse().then_some(spec.train.loss.gate))?;
    train::write_history(&history_path(out, fingerprint, seed), &run.history)?;
    Ok(SeedOutcome::Ok { metrics: run.metrics, best_iteration: run.best_iteration, val_acc: run.val_acc, predictions: run.predictions })
}

fn job(exp: &Experiment, spec: &RunSpec, fingerprint: &str, seed: u64, opts: &SweepOptions) -> Result<bool> {
    let start = Instant::now();
    let result = match opts.precision {
        Precision::F32 => execute::<f32>(exp, spec, fingerprint, seed, &opts.out),
        Precision::F64 => execute::<f64>(exp, spec, fingerprint, seed, &opts.out),
    };
    let ok = result.is_ok();
    let outcome = result.unwrap_or_else(|e| SeedOutcome::Failed { error: format!("{e:#}") });
    let rec = SeedRecord {
        fingerprint: fingerprint.to_string(),
        variant: spec.variant,
        seed,
        outcome,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&seed_record_path(&opts.out, fingerprint, seed), &rec)?;
    Ok(ok)
}

/// Runs the grid, skipping pairs that already have a successful record,
/// then rebuilds every run record and the default report.
pub fn sweep(exp: &Experiment, opts: &SweepOptions) -> Result<SweepSummary> {
    let specs = expand_grid(&exp.cfg)?;
    let fingerprints: Vec<String> = specs.iter().map(|s| s.fingerprint(&exp.cfg, opts.precision.as_str())).collect();
    let mut pending = Vec::new();
    let mut summary = SweepSummary { configs: specs.len(), ..Default::default() };
    for (i, fp) in fingerprints.iter().enumerate() {
        for &seed in &exp.cfg.seeds {
            if completed(&seed_record_path(&opts.out, fp, seed)) {
                summary.skipped += 1;
            } else {
                pending.push((i, seed));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs.max(1)).build()?;
    let results: Vec<Result<bool>> = pool.install(|| {
        pending.par_iter().map(|&(i, seed)| job(exp, &specs[i], &fingerprints[i], seed, opts)).collect()
    });
    for r in results {
        summary.executed += 1;
        if !r? {
            summary.failed += 1;
        }
    }

    for (i, (spec, fp)) in specs.iter().zip(&fingerprints).enumerate() {
        let rec = reduce(exp, spec, fp, i, opts)?;
        write_json(&record_path(&opts.out, fp), &rec)?;
    }
    let records = records::load_records(&opts.out)?;
    let files = report::build(&[records], &SelectBy::Natural)?;
    files.write(&opts.out.join("report"))?;
    Ok(summary)
}

fn reduce(exp: &Experiment, spec: &RunSpec, fp: &str, grid_index: usize, opts: &SweepOptions) -> Result<RunRecord> {
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    let mut predictions = Vec::new();
    let mut wall = 0.0;
    for &seed in &exp.cfg.seeds {
        let path = seed_record_path(&opts.out, fp, seed);
        let rec: SeedRecord = records::read_json(&path).with_context(|| format!("seed {seed} of {fp}"))?;
        wall += rec.wall_clock_secs;
        match rec.outcome {
            SeedOutcome::Ok { metrics, best_iteration, val_acc, predictions: p } => {
                seeds.push(SeedSummary { seed, metrics, best_iteration, val_acc });
                predictions.push(p);
            }
            SeedOutcome::Failed { error } => failures.push((seed, error)),
        }
    }
    let aggregate = if seeds.is_empty() {
        None
    } else {
        let bundles: Vec<_> = seeds.iter().map(|s| &s.metrics).collect();
        Some(train::aggregate(&bundles, &predictions, exp.info.classes).map_err(|e| anyhow!(e))?)
    };
    Ok(RunRecord {
        fingerprint: fp.to_string(),
        variant: spec.variant,
        grid_index,
        dataset: exp.info.clone(),
        precision: opts.precision,
        config: spec.train.clone(),
        seeds,
        failures,
        aggregate,
        wall_clock_secs: wall,
    })
}
