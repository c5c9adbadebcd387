use std::fmt::Write as _;

use crate::{Error, Result};

pub const CSV_HEADER: &str = "epoch,split,metric,value,seed,config_fingerprint";

/// One measurement. `epoch` is `None` for run-level results.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: Option<usize>,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Measurements from one run. Wall-clock time is kept out of the CSV so
/// repeated runs produce identical files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub fingerprint: String,
    pub records: Vec<MetricRecord>,
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    pub fn new(seed: u64, fingerprint: impl Into<String>) -> Self {
        Self { seed, fingerprint: fingerprint.into(), records: Vec::new(), wall_clock_secs: 0.0 }
    }

    pub fn epoch(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord { epoch: Some(epoch), split: split.into(), metric: metric.into(), value });
    }

    pub fn final_value(&mut self, split: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord { epoch: None, split: split.into(), metric: metric.into(), value });
    }

    pub fn get(&self, split: &str, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.epoch.is_none() && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// Per-epoch values of one metric, in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.epoch.is_some() && r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let epoch = r.epoch.map(|e| e.to_string()).unwrap_or_default();
            writeln!(out, "{epoch},{},{},{},{},{}", r.split, r.metric, r.value, self.seed, self.fingerprint).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::config(format!("metrics CSV must start with `{CSV_HEADER}`")));
        }
        let mut m = RunMetrics::new(0, "");
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::config(format!("metrics CSV line {}: {what}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [epoch, split, metric, value, seed, fp] = f[..] else {
                return Err(bad("expected 6 columns"));
            };
            let epoch = if epoch.is_empty() { None } else { Some(epoch.parse().map_err(|_| bad("bad epoch"))?) };
            let value: f64 = value.parse().map_err(|_| bad("bad value"))?;
            m.seed = seed.parse().map_err(|_| bad("bad seed"))?;
            m.fingerprint = fp.to_string();
            m.records.push(MetricRecord { epoch, split: split.into(), metric: metric.into(), value });
        }
        Ok(m)
    }
}
