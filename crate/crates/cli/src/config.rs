//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rss_core::attacks::AttackConfig;
use rss_core::data::{self, CsvSchema, Dataset};
use rss_core::gates::GateConfig;
use rss_core::losses::{GateSampling, Variant};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub dataset: DatasetConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Seed of the shared 60/20/20 split; each run redraws train/validation.
    #[serde(default)]
    pub split_seed: u64,
    pub grid: GridConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub gate: GateConfig,
    /// Default output directory; `--out` overrides it.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
        #[serde(default = "yes")]
        normalize: bool,
    },
    Idx {
        path: PathBuf,
        #[serde(default)]
        normalize: bool,
    },
    Synthetic {
        n: usize,
        m: usize,
        informative: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "yes")]
        normalize: bool,
    },
}

fn yes() -> bool {
    true
}

impl DatasetConfig {
    pub fn normalize(&self) -> bool {
        match self {
            Self::Csv { normalize, .. } | Self::Idx { normalize, .. } | Self::Synthetic { normalize, .. } => *normalize,
        }
    }

    /// Relative paths are resolved against `base` (the config's directory).
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Ok(match self {
            Self::Csv { path, schema, .. } => {
                let path = resolve(path);
                let (d, report) = data::load_csv(&path, schema).with_context(|| format!("loading {}", path.display()))?;
                if report.dropped > 0 {
                    eprintln!("{}: dropped: {} rows with missing values", path.display(), report.dropped);
                }
                d
            }
            Self::Idx { path, .. } => {
                let path = resolve(path);
                data::load_idx_dir(&path).with_context(|| format!("loading {}", path.display()))?
            }
            Self::Synthetic { n, m, informative, separation, seed, .. } => {
                data::synthetic_two_class(*n, *m, *informative, *separation, *seed)?
            }
        })
    }
}

/// Hyperparameter axes; every combination is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub learning_rate: Vec<f64>,
    pub hidden: Vec<Vec<usize>>,
    #[serde(default = "zero_axis")]
    pub weight_decay: Vec<f64>,
    #[serde(default = "zero_axis")]
    pub dropout: Vec<f64>,
    /// Only used by robust variants.
    #[serde(default)]
    pub rho: Vec<f64>,
    /// Only used by sparse variants.
    #[serde(default)]
    pub lambda: Vec<f64>,
    /// Only used by stable variants.
    #[serde(default = "default_a_fraction")]
    pub a_fraction: Vec<f64>,
}

fn zero_axis() -> Vec<f64> {
    vec![0.0]
}

fn default_a_fraction() -> Vec<f64> {
    vec![rss_core::losses::DEFAULT_A_FRACTION]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub validation_period: usize,
    pub gate_sampling: GateSampling,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { batch_size: 128, max_iterations: 50_000, validation_period: 1000, gate_sampling: GateSampling::PerBatch }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub radii: Vec<f64>,
    pub steps: usize,
    pub step_ratio: f64,
    pub restarts: usize,
    pub random_start: bool,
    pub clip: Option<(f64, f64)>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let std = AttackConfig::standard(0.0, 0);
        Self {
            radii: vec![1e-3, 1e-2, 1e-1],
            steps: std.steps,
            step_ratio: std.step_ratio,
            restarts: std.restarts,
            random_start: std.random_start,
            clip: None,
        }
    }
}

impl AttackSection {
    pub fn base(&self) -> AttackConfig {
        AttackConfig {
            radius: 0.0,
            steps: self.steps,
            step_ratio: self.step_ratio,
            restarts: self.restarts,
            random_start: self.random_start,
            seed: 0,
            clip: self.clip,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", self.version);
        }
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        if self.variants.is_empty() {
            bail!("no variants selected");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            bail!("seed list has duplicates");
        }
        self.gate.validate()?;
        self.base_attack_check()?;
        Ok(())
    }

    fn base_attack_check(&self) -> Result<()> {
        if self.attack.radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
            bail!("attack radii must be finite and non-negative");
        }
        AttackConfig { radius: 1.0, ..self.attack.base() }.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
name = "toy"
variants = ["nominal", "full"]
seeds = [1, 2]

[dataset]
kind = "synthetic"
n = 40
m = 3
informative = 2
separation = 3.0

[grid]
learning_rate = [1e-3]
hidden = [[4]]
rho = [0.01]
lambda = [1e-4]
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.variants, vec![Variant::Nominal, Variant::Full]);
        assert_eq!(cfg.grid.weight_decay, vec![0.0]);
        assert_eq!(cfg.training.batch_size, 128);
        assert_eq!(cfg.attack.radii, vec![1e-3, 1e-2, 1e-1]);
        assert!(cfg.dataset.normalize());
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = MINIMAL.replace("[grid]", "[grid]\nlearning_rat = [1.0]");
        let err = format!("{:#}", ExperimentConfig::from_toml(&text).unwrap_err());
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn rejects_empty_seeds_and_wrong_version() {
        assert!(ExperimentConfig::from_toml(&MINIMAL.replace("seeds = [1, 2]", "seeds = []")).is_err());
        assert!(ExperimentConfig::from_toml(&MINIMAL.replace("version = 1", "version = 2")).is_err());
    }
}
