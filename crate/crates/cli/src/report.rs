//! Aggregates run directories into summary and plot-series CSVs.
//!
//! Output goes to `<dir>/report/`:
//!
//! * `summary.csv`: `kind,label,split,metric,n,mean,sd` over run-level values
//! * `augment_series.csv`: test accuracy per augmentation preset
//! * `transfer_series.csv`: test accuracy against class count, one series
//!   per batch size
//!
//! Series files share the columns `series,x,y,sd,n`. `sd` is the sample
//! standard deviation across seeds (0 for a single seed). The bundle depends
//! only on the CSV and summary contents, never on directory order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use simcl_core::augment::Preset;
use simcl_core::learn::RunMetrics;

use crate::config::ExperimentKind;
use crate::runner::{write_atomic, Summary};
use crate::CliError;

pub const REPORT_DIR: &str = "report";

/// One run as found on disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub path: PathBuf,
    pub summary: Summary,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { n, mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub series: String,
    pub x: String,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub kind: ExperimentKind,
    /// Keyed by (label, split, metric).
    pub summary: BTreeMap<(String, String, String), Stat>,
    pub augment: Vec<SeriesPoint>,
    pub transfer: Vec<SeriesPoint>,
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for e in entries {
        let path = e.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            if path.file_name().is_some_and(|n| n == REPORT_DIR) {
                continue;
            }
            find_runs(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.csv") && path.with_file_name("summary.json").is_file() {
            out.push(path.parent().unwrap().to_path_buf());
        }
    }
    Ok(())
}

pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut paths = Vec::new();
    find_runs(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no runs (metrics.csv with summary.json) under {}", dir.display())));
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let csv = fs::read_to_string(p.join("metrics.csv")).map_err(|e| CliError::io(&p, e))?;
            let json = fs::read_to_string(p.join("summary.json")).map_err(|e| CliError::io(&p, e))?;
            let metrics = RunMetrics::from_csv(&csv).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let summary: Summary =
                serde_json::from_str(&json).map_err(|e| CliError::Usage(format!("{}/summary.json: {e}", p.display())))?;
            if metrics.fingerprint != summary.fingerprint {
                return Err(CliError::Usage(format!("{}: metrics and summary fingerprints differ", p.display())));
            }
            Ok(RunRecord { path: p, summary, metrics })
        })
        .collect()
}

/// Aggregates runs of a single experiment kind.
pub fn aggregate(runs: &[RunRecord]) -> Result<ReportBundle, CliError> {
    let kinds: BTreeSet<ExperimentKind> = runs.iter().map(|r| r.summary.kind).collect();
    let kind = match kinds.len() {
        0 => return Err(CliError::Usage("nothing to report".into())),
        1 => *kinds.iter().next().unwrap(),
        _ => {
            let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
            return Err(CliError::Usage(format!("runs mix experiment kinds ({}); report each experiment separately", names.join(", "))));
        }
    };
    let mut prints: BTreeMap<&str, &str> = BTreeMap::new();
    let mut seen: BTreeSet<(&str, u64)> = BTreeSet::new();
    let mut values: BTreeMap<(String, String, String), Vec<(u64, f64)>> = BTreeMap::new();
    let mut cells: BTreeMap<(usize, usize), Vec<(u64, f64)>> = BTreeMap::new();
    for r in runs {
        let s = &r.summary;
        let fp = prints.entry(&s.label).or_insert(&s.fingerprint);
        if *fp != s.fingerprint {
            return Err(CliError::Usage(format!("label `{}` has runs from configs {} and {}", s.label, fp, s.fingerprint)));
        }
        if !seen.insert((&s.label, s.seed)) {
            return Err(CliError::Usage(format!("label `{}` has seed {} twice (second at {})", s.label, s.seed, r.path.display())));
        }
        for rec in r.metrics.records.iter().filter(|m| m.epoch.is_none()) {
            values.entry((s.label.clone(), rec.split.clone(), rec.metric.clone())).or_default().push((s.seed, rec.value));
        }
        if let (Some(k), Some(b), Some(acc)) = (s.classes, s.batch_size, r.metrics.get("test", "accuracy")) {
            if matches!(kind, ExperimentKind::Transfer | ExperimentKind::ExpTransfer) {
                cells.entry((b, k)).or_default().push((s.seed, acc));
            }
        }
    }
    // Seed order, so sums do not depend on directory enumeration.
    let stat = |mut v: Vec<(u64, f64)>| {
        v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Stat::of(&v.iter().map(|p| p.1).collect::<Vec<_>>())
    };
    let summary: BTreeMap<_, _> = values.into_iter().map(|(k, v)| (k, stat(v))).collect();
    let augment = if matches!(kind, ExperimentKind::Finetune | ExperimentKind::ExpAugment) {
        Preset::ALL
            .iter()
            .filter_map(|p| {
                let key = (p.name().to_string(), "test".to_string(), "accuracy".to_string());
                summary.get(&key).map(|s| SeriesPoint { series: "test_accuracy".into(), x: p.name().into(), stat: s.clone() })
            })
            .collect()
    } else {
        Vec::new()
    };
    let transfer = cells
        .into_iter()
        .map(|((b, k), v)| SeriesPoint { series: format!("batch_size_{b}"), x: k.to_string(), stat: stat(v) })
        .collect();
    Ok(ReportBundle { kind, summary, augment, transfer })
}

impl ReportBundle {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("kind,label,split,metric,n,mean,sd\n");
        for ((label, split, metric), s) in &self.summary {
            writeln!(out, "{},{label},{split},{metric},{},{},{}", self.kind, s.n, s.mean, s.sd).unwrap();
        }
        out
    }

    pub fn series_csv(points: &[SeriesPoint]) -> String {
        let mut out = String::from("series,x,y,sd,n\n");
        for p in points {
            writeln!(out, "{},{},{},{},{}", p.series, p.x, p.stat.mean, p.stat.sd, p.stat.n).unwrap();
        }
        out
    }

    /// Human-readable table of the final metrics.
    pub fn table(&self) -> String {
        let width = self.summary.keys().map(|k| k.0.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:<5}  {:<22}  {:>3}  {:>10}  {:>8}\n", "label", "split", "metric", "n", "mean", "sd");
        for ((label, split, metric), s) in &self.summary {
            writeln!(out, "{label:<width$}  {split:<5}  {metric:<22}  {:>3}  {:>10.4}  {:>8.4}", s.n, s.mean, s.sd).unwrap();
        }
        out
    }

    /// Writes the bundle files and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        let root = dir.join(REPORT_DIR);
        let mut files = vec![(root.join("summary.csv"), self.summary_csv())];
        if !self.augment.is_empty() {
            files.push((root.join("augment_series.csv"), Self::series_csv(&self.augment)));
        }
        if !self.transfer.is_empty() {
            files.push((root.join("transfer_series.csv"), Self::series_csv(&self.transfer)));
        }
        for (path, text) in &files {
            write_atomic(path, text.as_bytes())?;
        }
        Ok(files.into_iter().map(|f| f.0).collect())
    }
}

/// Loads, aggregates and writes the report for `dir`.
pub fn report(dir: &Path) -> Result<ReportBundle, CliError> {
    let bundle = aggregate(&load_runs(dir)?)?;
    bundle.write(dir)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_of_single_value_is_exact() {
        assert_eq!(Stat::of(&[0.873]), Stat { n: 1, mean: 0.873, sd: 0.0 });
    }

    #[test]
    fn sample_sd() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
