//! Per-variant selection and the result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Result};

use rss_core::losses::Variant;
use rss_core::metrics::{improvement_captured, radius_key, MetricBundle};

use crate::records::{write_atomic, RunRecord};

#[derive(Clone, Debug, PartialEq)]
pub enum SelectBy {
    Natural,
    Adversarial(f64),
}

impl FromStr for SelectBy {
    type Err = anyhow::Error;

    /// `natural` or `adv:<radius>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "natural" {
            return Ok(SelectBy::Natural);
        }
        if let Some(r) = s.strip_prefix("adv:") {
            let rho: f64 = r.parse().map_err(|_| anyhow::anyhow!("bad radius {r:?}"))?;
            return Ok(SelectBy::Adversarial(rho));
        }
        bail!("unknown selection mode {s:?}; use \"natural\" or \"adv:<radius>\"")
    }
}

impl SelectBy {
    fn score(&self, m: &MetricBundle) -> Option<f64> {
        match self {
            SelectBy::Natural => Some(m.natural_acc),
            SelectBy::Adversarial(r) => m.adv_acc.get(&radius_key(*r)).copied(),
        }
    }

    fn describe(&self) -> String {
        match self {
            SelectBy::Natural => "best validation-selected natural accuracy".into(),
            SelectBy::Adversarial(r) => format!("best adversarial accuracy at radius {}", radius_key(*r)),
        }
    }
}

/// Best record per variant; ties go to the earliest grid position.
pub fn select<'a>(records: &'a [RunRecord], by: &SelectBy) -> BTreeMap<Variant, &'a RunRecord> {
    let mut best: BTreeMap<Variant, (&RunRecord, f64)> = BTreeMap::new();
    for r in records {
        let Some(score) = r.aggregate.as_ref().and_then(|m| by.score(m)) else { continue };
        match best.get(&r.variant) {
            Some((cur, s)) if *s > score || (*s == score && cur.grid_index <= r.grid_index) => {}
            _ => {
                best.insert(r.variant, (r, score));
            }
        }
    }
    best.into_iter().map(|(v, (r, _))| (v, r)).collect()
}

type Getter = Box<dyn Fn(&MetricBundle) -> Option<f64>>;

/// One metric row of the wide table.
struct Row {
    name: String,
    higher_is_better: bool,
    get: Getter,
    precision: usize,
}

fn rows(radii: &[String]) -> Vec<Row> {
    let mut out = vec![Row { name: "Accuracy".into(), higher_is_better: true, get: Box::new(|m| Some(m.natural_acc)), precision: 4 }];
    for r in radii {
        let key = r.clone();
        out.push(Row {
            name: format!("Adv. Accuracy ({r})"),
            higher_is_better: true,
            get: Box::new(move |m| m.adv_acc.get(&key).copied()),
            precision: 4,
        });
    }
    out.push(Row { name: "Stability".into(), higher_is_better: false, get: Box::new(|m| m.stability_score), precision: 6 });
    out.push(Row { name: "Sparsity".into(), higher_is_better: true, get: Box::new(|m| Some(m.sparsity)), precision: 4 });
    out
}

fn fmt(v: Option<f64>, precision: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.precision$}"))
}

fn align(table: &[Vec<String>]) -> String {
    let cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| table.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for row in table {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    s
}

fn csv_line(cells: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(cells).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Rendered report files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub table_csv: String,
    pub table_txt: String,
    pub summary_txt: String,
    pub warnings: Vec<String>,
}

impl ReportFiles {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("table.csv"), self.table_csv.as_bytes())?;
        write_atomic(&dir.join("table.txt"), self.table_txt.as_bytes())?;
        write_atomic(&dir.join("summary.txt"), self.summary_txt.as_bytes())?;
        Ok(())
    }
}

/// Builds the tables for one or more datasets (one record set each).
pub fn build(datasets: &[Vec<RunRecord>], by: &SelectBy) -> Result<ReportFiles> {
    let mut csv = String::new();
    let mut txt = String::new();
    let mut warnings = Vec::new();
    // (bucket, row name, variant) -> wins
    let mut wins: BTreeMap<(String, String), BTreeMap<Variant, usize>> = BTreeMap::new();
    let mut improvements = Vec::new();
    let mut present_any: Vec<Variant> = Vec::new();

    csv.push_str(&csv_line(&["dataset".into(), "metric".into(), "variant".into(), "value".into()]));
    let _ = writeln!(txt, "Selection: {}", by.describe());

    for records in datasets {
        let Some(first) = records.first() else { continue };
        let info = &first.dataset;
        let wanted: Vec<Variant> = {
            let mut v: Vec<Variant> = records.iter().map(|r| r.variant).collect();
            v.sort();
            v.dedup();
            v
        };
        let chosen = select(records, by);
        for v in &wanted {
            if !chosen.contains_key(v) {
                warnings.push(format!("{}: no usable record for variant {}; omitted", info.name, v.key()));
            }
        }
        let variants: Vec<Variant> = Variant::ALL.into_iter().filter(|v| chosen.contains_key(v)).collect();
        for v in &variants {
            if !present_any.contains(v) {
                present_any.push(*v);
            }
        }
        let mut radii: Vec<(f64, String)> = chosen
            .values()
            .filter_map(|r| r.aggregate.as_ref())
            .flat_map(|m| m.adv_acc.keys().map(|k| (k.parse::<f64>().unwrap_or(f64::NAN), k.clone())))
            .collect();
        radii.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        radii.dedup_by(|a, b| a.1 == b.1);
        let radii: Vec<String> = radii.into_iter().map(|r| r.1).collect();
        let table_rows = rows(&radii);

        let _ = writeln!(
            txt,
            "\n{} (rows {}, features {}, classes {}, size {})",
            info.name,
            info.rows,
            info.features,
            info.classes,
            info.size_bucket()
        );
        let mut grid: Vec<Vec<String>> = vec![std::iter::once(String::new()).chain(variants.iter().map(|v| v.label().to_string())).collect()];
        for row in &table_rows {
            let values: Vec<Option<f64>> = variants.iter().map(|v| chosen[v].aggregate.as_ref().and_then(|m| (row.get)(m))).collect();
            let mut line = vec![row.name.clone()];
            for (v, val) in variants.iter().zip(&values) {
                line.push(fmt(*val, row.precision));
                csv.push_str(&csv_line(&[info.name.clone(), row.name.clone(), v.key().into(), val.map_or(String::new(), |x| format!("{x}"))]));
            }
            grid.push(line);

            let best = values.iter().flatten().copied().fold(None, |acc: Option<f64>, x| {
                Some(match acc {
                    None => x,
                    Some(a) if row.higher_is_better => a.max(x),
                    Some(a) => a.min(x),
                })
            });
            for bucket in [info.size_bucket().to_string(), "all".to_string()] {
                let entry = wins.entry((bucket, row.name.clone())).or_default();
                for (v, val) in variants.iter().zip(&values) {
                    let w = entry.entry(*v).or_default();
                    if best.is_some() && *val == best {
                        *w += 1;
                    }
                }
            }
        }
        txt.push_str(&align(&grid));

        let mut sel: Vec<Vec<String>> = vec![vec![
            "variant".into(),
            "fingerprint".into(),
            "lr".into(),
            "hidden".into(),
            "wd".into(),
            "dropout".into(),
            "rho".into(),
            "lambda".into(),
            "a".into(),
            "seeds".into(),
        ]];
        for v in &variants {
            let r = chosen[v];
            let c = &r.config;
            let opt = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:e}"));
            sel.push(vec![
                v.label().into(),
                r.fingerprint.clone(),
                format!("{:e}", c.learning_rate),
                format!("{:?}", c.hidden),
                format!("{:e}", c.loss.weight_decay),
                format!("{}", c.dropout),
                opt(c.loss.rho),
                opt(c.loss.lambda),
                opt(c.loss.a_fraction),
                format!("{}/{}", r.seeds.len(), r.seeds.len() + r.failures.len()),
            ]);
        }
        txt.push_str("\nSelected configurations\n");
        txt.push_str(&align(&sel));

        if let Some(nominal) = chosen.get(&Variant::Nominal).and_then(|r| r.aggregate.as_ref()) {
            for v in variants.iter().filter(|v| **v != Variant::Nominal) {
                let Some(m) = chosen[v].aggregate.as_ref() else { continue };
                let mut cells = vec![info.name.clone(), v.label().to_string()];
                let nat = improvement_captured(nominal.natural_acc, m.natural_acc).ok();
                cells.push(fmt(nat, 4));
                for r in &radii {
                    let val = match (nominal.adv_acc.get(r), m.adv_acc.get(r)) {
                        (Some(&a), Some(&b)) => improvement_captured(a, b).ok(),
                        _ => None,
                    };
                    cells.push(fmt(val, 4));
                }
                improvements.push((radii.clone(), cells));
            }
        } else if !variants.is_empty() {
            warnings.push(format!("{}: no nominal record; improvement captured not computed", info.name));
        }
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "Selection: {}", by.describe());
    summary.push_str("\nImprovement captured over the nominal model: (variant - nominal) / (1 - nominal)\n");
    if improvements.is_empty() {
        summary.push_str("(none)\n");
    } else {
        let radii = &improvements[0].0;
        let mut t = vec![std::iter::once("dataset".to_string())
            .chain(std::iter::once("variant".to_string()))
            .chain(std::iter::once("natural".to_string()))
            .chain(radii.iter().map(|r| format!("adv {r}")))
            .collect::<Vec<_>>()];
        t.extend(improvements.into_iter().map(|(_, c)| c));
        summary.push_str(&align(&t));
    }
    summary.push_str("\nWin counts (ties count for every tied variant)\n");
    let variants: Vec<Variant> = Variant::ALL.into_iter().filter(|v| present_any.contains(v)).collect();
    let mut t = vec![std::iter::once("size".to_string())
        .chain(std::iter::once("metric".to_string()))
        .chain(variants.iter().map(|v| v.label().to_string()))
        .collect::<Vec<_>>()];
    for ((bucket, metric), counts) in &wins {
        let mut line = vec![bucket.clone(), metric.clone()];
        line.extend(variants.iter().map(|v| counts.get(v).copied().unwrap_or(0).to_string()));
        t.push(line);
    }
    summary.push_str(&align(&t));
    if !warnings.is_empty() {
        summary.push_str("\nWarnings\n");
        for w in &warnings {
            let _ = writeln!(summary, "- {w}");
        }
    }
    Ok(ReportFiles { table_csv: csv, table_txt: txt, summary_txt: summary, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{DatasetInfo, Precision, SeedSummary};
    use rss_core::train::TrainConfig;

    fn record(variant: Variant, idx: usize, acc: f64, adv: f64) -> RunRecord {
        let mut m = MetricBundle { natural_acc: acc, sparsity: 0.0, ..Default::default() };
        m.adv_acc.insert(radius_key(0.01), adv);
        RunRecord {
            fingerprint: format!("fp{idx}"),
            variant,
            grid_index: idx,
            dataset: DatasetInfo { name: "toy".into(), rows: 10, features: 2, classes: 2 },
            precision: Precision::F64,
            config: TrainConfig::new(vec![4], 1e-3, variant.spec(0.01, 1e-4, 0.7, 0.0, Default::default()), 0),
            seeds: vec![SeedSummary { seed: 0, metrics: m.clone(), best_iteration: 0, val_acc: acc }],
            failures: vec![],
            aggregate: Some(m),
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn parses_modes() {
        assert_eq!("natural".parse::<SelectBy>().unwrap(), SelectBy::Natural);
        assert_eq!("adv:1e-2".parse::<SelectBy>().unwrap(), SelectBy::Adversarial(0.01));
        assert!("adv".parse::<SelectBy>().is_err());
    }

    #[test]
    fn selection_honors_criterion_and_ties() {
        let recs = vec![
            record(Variant::Nominal, 0, 0.8, 0.5),
            record(Variant::Nominal, 1, 0.9, 0.2),
            record(Variant::Nominal, 2, 0.9, 0.1),
        ];
        assert_eq!(select(&recs, &SelectBy::Natural)[&Variant::Nominal].grid_index, 1);
        assert_eq!(select(&recs, &SelectBy::Adversarial(0.01))[&Variant::Nominal].grid_index, 0);
    }

    #[test]
    fn single_record_is_echoed() {
        let files = build(&[vec![record(Variant::Nominal, 0, 0.875, 0.5)]], &SelectBy::Natural).unwrap();
        assert!(files.table_txt.contains("0.8750"));
        assert!(files.table_csv.contains("toy,Accuracy,nominal,0.875\n"));
    }

    #[test]
    fn win_counts() {
        let recs = vec![record(Variant::Nominal, 0, 0.9, 0.3), record(Variant::Full, 1, 0.92, 0.3)];
        let files = build(&[recs], &SelectBy::Natural).unwrap();
        let line = files.summary_txt.lines().find(|l| l.starts_with("all") && l.contains("Accuracy") && !l.contains("Adv")).unwrap();
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(&cells[cells.len() - 2..], &["0", "1"]);
        let adv = files.summary_txt.lines().find(|l| l.starts_with("all") && l.contains("Adv")).unwrap();
        let cells: Vec<&str> = adv.split_whitespace().collect();
        assert_eq!(&cells[cells.len() - 2..], &["1", "1"]);
        assert!(files.summary_txt.contains("0.2000"));
    }

    #[test]
    fn table_has_all_metric_rows_and_variant_columns() {
        let recs: Vec<RunRecord> = Variant::ALL.iter().enumerate().map(|(i, v)| record(*v, i, 0.9, 0.4)).collect();
        let files = build(&[recs], &SelectBy::Natural).unwrap();
        let header = files.table_txt.lines().find(|l| l.contains("Nominal")).unwrap();
        assert_eq!(header.split_whitespace().count(), 8);
        for name in ["Accuracy", "Adv. Accuracy (1e-2)", "Stability", "Sparsity"] {
            assert!(files.table_txt.lines().any(|l| l.starts_with(name)), "{name}");
        }
    }
}
