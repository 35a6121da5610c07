//! Append-only line-delimited report rows plus columnar summaries. Rows are
//! self-describing: every row carries the provenance keys needed to
//! regenerate any summary statistic.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const REPORT_SCHEMA: &str = "equirobust-report-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schema: String,
    pub run_id: String,
    pub dataset_digest: String,
    pub model: String,
    pub depth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub severity: Option<u8>,
    pub metric: String,
    pub value: f64,
    /// Standard deviation across seeds; absent (never 0) for one seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl ReportRow {
    pub fn new(
        run_id: &str,
        dataset_digest: &str,
        model: &str,
        depth: usize,
        metric: &str,
        value: f64,
    ) -> Self {
        ReportRow {
            schema: REPORT_SCHEMA.to_string(),
            run_id: run_id.to_string(),
            dataset_digest: dataset_digest.to_string(),
            model: model.to_string(),
            depth,
            seed: None,
            attack: None,
            epsilon: None,
            corruption: None,
            severity: None,
            metric: metric.to_string(),
            value,
            std: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_attack(mut self, attack: &str, epsilon: f64) -> Self {
        self.attack = Some(attack.to_string());
        self.epsilon = Some(epsilon);
        self
    }

    pub fn with_corruption(mut self, kind: &str, severity: u8) -> Self {
        self.corruption = Some(kind.to_string());
        self.severity = Some(severity);
        self
    }
}

/// Append-only JSONL writer; flushed per row so partial runs persist.
pub struct ReportWriter {
    path: PathBuf,
    file: std::fs::File,
    rows_written: usize,
}

impl ReportWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(ReportWriter {
            path: path.to_path_buf(),
            file,
            rows_written: 0,
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(ReportWriter {
            path: path.to_path_buf(),
            file,
            rows_written: 0,
        })
    }

    pub fn write_row(&mut self, row: &ReportRow) -> Result<()> {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::invalid(format!("row serialization: {e}")))?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        self.rows_written += 1;
        Ok(())
    }

    pub fn rows_written(&self) -> usize {
        self.rows_written
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ReportRow = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: bad report row: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Digest of the report contents (rows only; run metadata with timestamps
/// lives in a separate file and never enters this digest).
pub fn report_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(crate::zoo::hex(&h.finalize()))
}

/// Aggregation key: everything except seed, value, and std.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SummaryKey {
    pub model: String,
    pub depth: usize,
    pub attack: Option<String>,
    pub epsilon: Option<String>,
    pub corruption: Option<String>,
    pub severity: Option<u8>,
    pub metric: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub depth: usize,
    pub attack: Option<String>,
    pub epsilon: Option<f64>,
    pub corruption: Option<String>,
    pub severity: Option<u8>,
    pub metric: String,
    pub n_seeds: usize,
    pub mean: f64,
    /// Absent for a single seed, never reported as 0.
    pub std: Option<f64>,
}

/// Mean +/- sample standard deviation across per-seed rows sharing a key.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<SummaryKey, Vec<&ReportRow>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.seed.is_some()) {
        let key = SummaryKey {
            model: row.model.clone(),
            depth: row.depth,
            attack: row.attack.clone(),
            epsilon: row.epsilon.map(|e| format!("{e:.6}")),
            corruption: row.corruption.clone(),
            severity: row.severity,
            metric: row.metric.clone(),
        };
        groups.entry(key).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|(_, group)| {
            let n = group.len();
            let mean = group.iter().map(|r| r.value).sum::<f64>() / n as f64;
            let std = if n > 1 {
                let var = group
                    .iter()
                    .map(|r| (r.value - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1) as f64;
                Some(var.sqrt())
            } else {
                None
            };
            let first = group[0];
            SummaryRow {
                model: first.model.clone(),
                depth: first.depth,
                attack: first.attack.clone(),
                epsilon: first.epsilon,
                corruption: first.corruption.clone(),
                severity: first.severity,
                metric: first.metric.clone(),
                n_seeds: n,
                mean,
                std,
            }
        })
        .collect()
}

/// Columnar (CSV) summary file usable directly as plot data.
pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "model,depth,attack,epsilon,corruption,severity,metric,n_seeds,mean,std"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.depth,
            r.attack.as_deref().unwrap_or(""),
            r.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            r.corruption.as_deref().unwrap_or(""),
            r.severity.map(|s| s.to_string()).unwrap_or_default(),
            r.metric,
            r.n_seeds,
            r.mean,
            r.std.map(|s| s.to_string()).unwrap_or_default(),
        )?;
    }
    Ok(())
}
