//! On-disk run records and the output directory layout.
//!
//! ```text
//! <out>/runs/<fingerprint>/seed-<s>.json     per-seed record
//! <out>/runs/<fingerprint>/model-<s>.json    best checkpoint
//! <out>/runs/<fingerprint>/history-<s>.csv   validation history
//! <out>/records/<fingerprint>.json           aggregated run record
//! <out>/report/                              tables
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use rss_core::losses::Variant;
use rss_core::metrics::MetricBundle;
use rss_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub rows: usize,
    /// Features after encoding.
    pub features: usize,
    pub classes: usize,
}

impl DatasetInfo {
    /// Size bucket by rows times features.
    pub fn size_bucket(&self) -> &'static str {
        match self.rows * self.features {
            s if s < 10_000 => "small",
            s if s < 100_000 => "medium",
            _ => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedOutcome {
    Ok {
        metrics: MetricBundle,
        best_iteration: usize,
        val_acc: f64,
        /// Test-set predictions of the selected checkpoint.
        predictions: Vec<usize>,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub fingerprint: String,
    pub variant: Variant,
    pub seed: u64,
    pub outcome: SeedOutcome,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics: MetricBundle,
    pub best_iteration: usize,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub variant: Variant,
    /// Position in the expanded grid; breaks selection ties.
    pub grid_index: usize,
    pub dataset: DatasetInfo,
    pub precision: Precision,
    /// Training configuration with the seed zeroed.
    pub config: TrainConfig,
    pub seeds: Vec<SeedSummary>,
    pub failures: Vec<(u64, String)>,
    /// Means over successful seeds plus their ensemble stability score.
    pub aggregate: Option<MetricBundle>,
    pub wall_clock_secs: f64,
}

pub fn seed_record_path(out: &Path, fingerprint: &str, seed: u64) -> PathBuf {
    out.join("runs").join(fingerprint).join(format!("seed-{seed}.json"))
}

pub fn model_path(out: &Path, fingerprint: &str, seed: u64) -> PathBuf {
    out.join("runs").join(fingerprint).join(format!("model-{seed}.json"))
}

pub fn history_path(out: &Path, fingerprint: &str, seed: u64) -> PathBuf {
    out.join("runs").join(fingerprint).join(format!("history-{seed}.csv"))
}

pub fn record_path(out: &Path, fingerprint: &str) -> PathBuf {
    out.join("records").join(format!("{fingerprint}.json"))
}

/// Writes through a temporary file in the same directory and renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))
}

/// All run records in `<out>/records`, ordered by grid position.
pub fn load_records(out: &Path) -> Result<Vec<RunRecord>> {
    let dir = out.join("records");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut records: Vec<RunRecord> = paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    records.sort_by(|a, b| a.grid_index.cmp(&b.grid_index).then_with(|| a.fingerprint.cmp(&b.fingerprint)));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets() {
        let info = |rows, features| DatasetInfo { name: "d".into(), rows, features, classes: 2 };
        assert_eq!(info(100, 99).size_bucket(), "small");
        assert_eq!(info(100, 100).size_bucket(), "medium");
        assert_eq!(info(70_000, 784).size_bucket(), "large");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_json(&p, &vec![1, 2]).unwrap();
        write_json(&p, &vec![3]).unwrap();
        let v: Vec<i32> = read_json(&p).unwrap();
        assert_eq!(v, vec![3]);
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
