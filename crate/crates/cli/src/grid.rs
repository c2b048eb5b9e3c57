//! Cartesian expansion of the hyperparameter grid and run fingerprints.

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rss_core::attacks::AttackConfig;
use rss_core::losses::Variant;
use rss_core::train::TrainConfig;

use crate::config::{DatasetConfig, ExperimentConfig};

/// One grid point: everything that determines a run except the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: Variant,
    pub train: TrainConfig,
}

/// The fully resolved inputs hashed into a fingerprint.
#[derive(Serialize)]
struct Resolved<'a> {
    format: u32,
    dataset: &'a DatasetConfig,
    split_seed: u64,
    variant: Variant,
    train: &'a TrainConfig,
    radii: &'a [f64],
    attack: &'a AttackConfig,
    precision: &'a str,
}

impl RunSpec {
    /// Stable hash of the resolved configuration, independent of seed.
    pub fn fingerprint(&self, cfg: &ExperimentConfig, precision: &str) -> String {
        let attack = cfg.attack.base();
        let resolved = Resolved {
            format: 1,
            dataset: &cfg.dataset,
            split_seed: cfg.split_seed,
            variant: self.variant,
            train: &TrainConfig { seed: 0, ..self.train.clone() },
            radii: &cfg.attack.radii,
            attack: &attack,
            precision,
        };
        let json = serde_json::to_vec(&resolved).expect("plain data serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn axis<'a, T>(name: &str, values: &'a [T], used: bool, unused: &'a [T]) -> Result<&'a [T]> {
    if values.is_empty() {
        if used {
            bail!("grid axis {name:?} is empty");
        }
        return Ok(unused);
    }
    Ok(if used { values } else { &values[..1] })
}

/// Every hyperparameter combination for every variant, in a fixed order:
/// variant, learning rate, hidden sizes, weight decay, dropout, rho, lambda,
/// a_fraction. Axes a variant does not use collapse to one value.
pub fn expand_grid(cfg: &ExperimentConfig) -> Result<Vec<RunSpec>> {
    let g = &cfg.grid;
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        let lrs = axis("learning_rate", &g.learning_rate, true, &[])?;
        let hidden = axis("hidden", &g.hidden, true, &[])?;
        let wds = axis("weight_decay", &g.weight_decay, true, &[])?;
        let drops = axis("dropout", &g.dropout, true, &[])?;
        let rhos = axis("rho", &g.rho, variant.is_robust(), &[0.0])?;
        let lambdas = axis("lambda", &g.lambda, variant.is_sparse(), &[0.0])?;
        let fracs = axis("a_fraction", &g.a_fraction, variant.is_stable(), &[0.0])?;
        for &lr in lrs {
            for h in hidden {
                for &wd in wds {
                    for &dropout in drops {
                        for &rho in rhos {
                            for &lambda in lambdas {
                                for &frac in fracs {
                                    let loss = variant.spec(rho, lambda, frac, wd, cfg.gate);
                                    let mut train = TrainConfig::new(h.clone(), lr, loss, 0);
                                    train.batch_size = cfg.training.batch_size;
                                    train.max_iterations = cfg.training.max_iterations;
                                    train.validation_period = cfg.training.validation_period;
                                    train.gate_sampling = cfg.training.gate_sampling;
                                    train.dropout = dropout;
                                    train.validate()?;
                                    out.push(RunSpec { variant, train });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
