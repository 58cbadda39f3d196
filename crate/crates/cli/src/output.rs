//! CSV tables and the JSON run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use polymer_core::estimators::EstimateReport;
use serde::Serialize;

/// Formats a float for CSV: plain decimal in `[1e-4, 1e6)`, scientific
/// otherwise, `nan`/`inf` spelled out. Independent of locale.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else if x == 0.0 || (x.abs() >= 1e-4 && x.abs() < 1e6) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// One CSV file. The first column of every table is the config hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, columns: &[&str]) -> Self {
        let mut header = vec!["config_hash".to_string()];
        header.extend(columns.iter().map(|c| c.to_string()));
        Table { file: file.to_string(), header, rows: Vec::new() }
    }

    pub fn push(&mut self, hash: &str, cells: Vec<String>) {
        assert_eq!(cells.len() + 1, self.header.len(), "row width of {}", self.file);
        let mut row = vec![hash.to_string()];
        row.extend(cells);
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> csv::Result<()> {
        let mut w = csv::Writer::from_path(dir.join(&self.file))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of one acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn below(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, bound: format!("< {}", num(limit)), passed: value < limit }
    }

    pub fn above(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, bound: format!("> {}", num(limit)), passed: value > limit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub replicas: usize,
    pub config_hash: String,
    pub seed: u64,
    pub extras: BTreeMap<String, f64>,
}

impl From<&EstimateReport> for EstimateRecord {
    fn from(r: &EstimateReport) -> Self {
        EstimateRecord {
            name: r.name.clone(),
            value: r.value,
            std_error: r.std_error,
            replicas: r.replicas,
            config_hash: r.config_hash.clone(),
            seed: r.seed,
            extras: r.extras.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub thresholds_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub canonical_config: String,
    pub threads: usize,
    pub seed: u64,
    /// How per-replica random streams derive from the master seed.
    pub stream_scheme: String,
    pub replicas: usize,
    pub replay: String,
    pub status: String,
    pub wall_time_s: f64,
    pub thresholds: BTreeMap<String, f64>,
    pub files: Vec<String>,
    pub estimates: Vec<EstimateRecord>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join("manifest.json"), text + "\n")
    }
}
