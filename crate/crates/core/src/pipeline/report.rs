//! Report rows and their CSV / JSON serializations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.json";

/// Region label of whole-grid metrics.
pub const REGION_ALL: &str = "all";

/// One metric value, tagged with the config hash and seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub metric: String,
    /// Forecast step (1-based); empty for clip-independent metrics.
    pub horizon: Option<usize>,
    pub region: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Mean and sample std of one `(metric, horizon, region)` across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub metric: String,
    pub horizon: Option<usize>,
    pub region: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub rows: Vec<Row>,
    /// Settings and extra outputs recorded in the JSON only: bandwidths,
    /// bin edges, seeds, step budgets, runtimes.
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Report {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            rows: Vec::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, metric: &str, horizon: Option<usize>, region: &str, value: f64, seed: u64) {
        self.rows.push(Row {
            metric: metric.into(),
            horizon,
            region: region.into(),
            value,
            seed,
            config_hash: self.config_hash.clone(),
        });
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("provenance value serializes");
        self.provenance.insert(key.into(), v);
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
        self.provenance.extend(other.provenance);
    }

    /// Rows matching `metric`, `horizon` and `region`.
    pub fn values(&self, metric: &str, horizon: Option<usize>, region: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric && r.horizon == horizon && r.region == region)
            .map(|r| r.value)
            .collect()
    }

    /// First value of `(metric, horizon, region)`.
    pub fn value(&self, metric: &str, horizon: Option<usize>, region: &str) -> Option<f64> {
        self.values(metric, horizon, region).first().copied()
    }

    /// Statistics across seeds per key, in first-appearance order.
    pub fn seed_stats(&self) -> Vec<SeedStat> {
        let mut order: Vec<(String, Option<usize>, String)> = Vec::new();
        let mut groups: BTreeMap<(String, Option<usize>, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.metric.clone(), r.horizon, r.region.clone());
            groups.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Vec::new()
            }).push(r.value);
        }
        order
            .into_iter()
            .map(|key| {
                let v = &groups[&key];
                let (mean, std) = mean_std(v);
                SeedStat {
                    metric: key.0,
                    horizon: key.1,
                    region: key.2,
                    n: v.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["metric", "horizon", "region", "value", "seed", "config_hash"])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "rows": self.rows,
            "seed_stats": self.seed_stats(),
            "provenance": self.provenance,
        })
    }

    /// Writes `report.csv` and `report.json` into `dir`, creating it.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CSV_FILE), self.to_csv_string()?)?;
        let json = serde_json::to_string_pretty(&self.to_json_value())?;
        std::fs::write(dir.join(JSON_FILE), json + "\n")?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Row>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?)
    }
}

/// Mean and sample (n-1) standard deviation; std is 0 for a single value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_header() {
        let mut r = Report::new("eval", "h1");
        r.push("iou", Some(1), REGION_ALL, 0.1 + 0.2, 3);
        r.push("bpd", None, "bin0", -1e-300, 4);
        let text = r.to_csv_string().unwrap();
        assert!(text.starts_with("metric,horizon,region,value,seed,config_hash\n"));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let back = Report::read_csv(dir.path().join(CSV_FILE)).unwrap();
        assert_eq!(back, r.rows);
        assert_eq!(back[0].value.to_bits(), (0.1f64 + 0.2).to_bits());
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(JSON_FILE)).unwrap()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn empty_report_still_has_header() {
        let text = Report::new("x", "h").to_csv_string().unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn seed_stats_group_by_key() {
        let mut r = Report::new("eval", "h");
        for (s, v) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            r.push("iou", Some(1), REGION_ALL, v, s as u64);
            r.push("iou", Some(2), REGION_ALL, 10.0, s as u64);
        }
        let st = r.seed_stats();
        assert_eq!(st.len(), 2);
        assert_eq!((st[0].n, st[0].mean, st[0].std), (3, 2.0, 1.0));
        assert_eq!((st[1].mean, st[1].std), (10.0, 0.0));
    }
}
