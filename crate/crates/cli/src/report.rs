//! Report assembly and serialization: line-delimited JSON for machines,
//! CSV tables (rows = methods, columns = metrics, plus relative-drop
//! columns for bias-level sweeps) for papers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mrrec_core::BiasReport;
use serde::{Deserialize, Serialize};

use crate::runner::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Best training round for methods with early stopping.
    pub best_round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub bias_level: Option<u8>,
    pub lambda: Option<f64>,
    pub per_seed: Vec<SeedOutcome>,
    pub aggregate: BTreeMap<String, MeanSd>,
    pub bias: Vec<BiasReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Canonical resolved config for provenance.
    pub config_toml: String,
    pub config_hash: String,
    pub metrics: Vec<String>,
    pub rows: Vec<MethodReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    JsonLines,
    CsvTable,
}

impl ReportFormat {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "json" | "json_lines" => Some(ReportFormat::JsonLines),
            "csv" | "csv_table" => Some(ReportFormat::CsvTable),
            _ => None,
        }
    }
}

impl ExperimentReport {
    /// First line is a provenance header; each following line is one
    /// method row.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let header = serde_json::json!({
            "config_hash": self.config_hash,
            "config_toml": self.config_toml,
            "metrics": self.metrics,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    /// Rows = method (x level x lambda), columns = aggregate metric means.
    /// When several bias levels are present, each metric gains a relative
    /// drop column (value_at_lowest_level - value) / value_at_lowest_level.
    pub fn to_csv_table(&self) -> String {
        let levels: Vec<u8> = {
            let mut l: Vec<u8> = self.rows.iter().filter_map(|r| r.bias_level).collect();
            l.sort_unstable();
            l.dedup();
            l
        };
        let with_drops = levels.len() > 1;
        let mut header = vec!["method".to_string(), "bias_level".into(), "lambda".into()];
        for m in &self.metrics {
            header.push(m.clone());
            header.push(format!("{m}_sd"));
        }
        if with_drops {
            for m in &self.metrics {
                header.push(format!("{m}_rel_drop"));
            }
        }
        let mut out = header.join(",");
        out.push('\n');

        let base_level = levels.first().copied();
        for row in &self.rows {
            let mut cells = vec![
                row.method.clone(),
                row.bias_level.map_or(String::new(), |l| l.to_string()),
                row.lambda.map_or(String::new(), |l| l.to_string()),
            ];
            for m in &self.metrics {
                match row.aggregate.get(m) {
                    Some(v) => {
                        cells.push(format!("{}", v.mean));
                        cells.push(format!("{}", v.sd));
                    }
                    None => {
                        cells.push(String::new());
                        cells.push(String::new());
                    }
                }
            }
            if with_drops {
                // reference row: same method and lambda at the lowest level
                let reference = self.rows.iter().find(|r| {
                    r.method == row.method && r.lambda == row.lambda && r.bias_level == base_level
                });
                for m in &self.metrics {
                    let drop = reference.and_then(|b| {
                        let v0 = b.aggregate.get(m)?.mean;
                        let v = row.aggregate.get(m)?.mean;
                        if v0 != 0.0 {
                            Some((v0 - v) / v0)
                        } else {
                            None
                        }
                    });
                    cells.push(drop.map_or(String::new(), |d| format!("{d}")));
                }
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Write the report into `out_dir` and return the written paths.
pub fn emit_report(
    report: &ExperimentReport,
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, RunError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| RunError::Runtime(format!("create {}: {e}", out_dir.display())))?;
    let (name, body) = match format {
        ReportFormat::JsonLines => ("report.jsonl", report.to_json_lines()),
        ReportFormat::CsvTable => ("report.csv", report.to_csv_table()),
    };
    let path = out_dir.join(name);
    std::fs::write(&path, body)
        .map_err(|e| RunError::Runtime(format!("write {}: {e}", path.display())))?;
    Ok(vec![path])
}
