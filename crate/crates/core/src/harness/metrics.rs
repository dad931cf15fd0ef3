//! Newline-delimited JSON metrics with comma-separated mirrors.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_mpt: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens_seen: u64,
    pub wall_ms: f64,
}

impl MetricsRow {
    /// Equality on everything except the wall clock.
    pub fn same_values(&self, other: &MetricsRow) -> bool {
        MetricsRow {
            wall_ms: 0.0,
            ..self.clone()
        } == MetricsRow {
            wall_ms: 0.0,
            ..other.clone()
        }
    }
}

fn csv_header(depths: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "split", "loss_total", "loss_main"]
        .map(String::from)
        .to_vec();
    h.extend((1..=depths).map(|j| format!("loss_mpt_{j}")));
    h.extend(["lr", "grad_norm", "tokens_seen", "wall_ms"].map(String::from));
    h
}

fn csv_record(r: &MetricsRow) -> Vec<String> {
    let mut rec = vec![
        r.step.to_string(),
        r.split.clone(),
        r.loss_total.to_string(),
        r.loss_main.to_string(),
    ];
    rec.extend(r.loss_mpt.iter().map(f64::to_string));
    rec.extend([
        r.lr.to_string(),
        r.grad_norm.to_string(),
        r.tokens_seen.to_string(),
        r.wall_ms.to_string(),
    ]);
    rec
}

struct FileSinks {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
}

/// Collects metric rows in memory and optionally streams them to
/// `<dir>/<name>.jsonl` and `<dir>/csv/<name>.csv`.
pub struct MetricsSink {
    rows: Vec<MetricsRow>,
    last_step: HashMap<String, u64>,
    files: Option<FileSinks>,
    echo: bool,
}

impl MetricsSink {
    pub fn memory() -> Self {
        MetricsSink {
            rows: Vec::new(),
            last_step: HashMap::new(),
            files: None,
            echo: false,
        }
    }

    pub fn to_files(dir: &Path, name: &str, depths: usize) -> Result<Self> {
        fs::create_dir_all(dir.join("csv"))?;
        let jsonl = BufWriter::new(File::create(dir.join(format!("{name}.jsonl")))?);
        let mut csv = csv::Writer::from_path(dir.join("csv").join(format!("{name}.csv")))?;
        csv.write_record(csv_header(depths))?;
        Ok(MetricsSink {
            files: Some(FileSinks { jsonl, csv }),
            ..MetricsSink::memory()
        })
    }

    /// Also print each row to stdout.
    pub fn with_echo(mut self, echo: bool) -> Self {
        self.echo = echo;
        self
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(&last) = self.last_step.get(&row.split) {
            if row.step <= last {
                return Err(Error::contract(format!(
                    "{} metrics step {} does not follow step {last}",
                    row.split, row.step
                )));
            }
        }
        self.last_step.insert(row.split.clone(), row.step);
        let line = serde_json::to_string(&row)?;
        if self.echo {
            println!("{line}");
        }
        if let Some(f) = &mut self.files {
            writeln!(f.jsonl, "{line}")?;
            f.csv.write_record(csv_record(&row))?;
            f.jsonl.flush()?;
            f.csv.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }
}

/// Writes arbitrary records as `<path>` (JSON lines) plus a CSV mirror next to it.
pub fn write_records<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in rows {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    let mut csv = csv::Writer::from_path(path.with_extension("csv"))?;
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn metrics_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, split: &str) -> MetricsRow {
        MetricsRow {
            step,
            split: split.into(),
            loss_total: 1.0,
            loss_main: 0.5,
            loss_mpt: vec![0.25, 0.125],
            lr: 1e-3,
            grad_norm: 2.0,
            tokens_seen: 64,
            wall_ms: 3.5,
        }
    }

    #[test]
    fn field_order_is_fixed() {
        let s = serde_json::to_string(&row(0, "train")).unwrap();
        let keys = [
            "step",
            "split",
            "loss_total",
            "loss_main",
            "loss_mpt",
            "lr",
            "grad_norm",
            "tokens_seen",
            "wall_ms",
        ];
        let pos: Vec<usize> = keys
            .iter()
            .map(|k| s.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{s}");
    }

    #[test]
    fn steps_must_increase_per_split() {
        let mut sink = MetricsSink::memory();
        sink.push(row(0, "train")).unwrap();
        sink.push(row(0, "heldout")).unwrap();
        assert!(sink.push(row(0, "train")).is_err());
        sink.push(row(1, "train")).unwrap();
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricsSink::to_files(dir.path(), "run", 2).unwrap();
        sink.push(row(0, "train")).unwrap();
        sink.push(row(1, "train")).unwrap();
        drop(sink);
        let back = read_jsonl(&metrics_path(dir.path(), "run")).unwrap();
        assert_eq!(back, vec![row(0, "train"), row(1, "train")]);
        let csv = fs::read_to_string(dir.path().join("csv/run.csv")).unwrap();
        assert!(csv.starts_with("step,split,loss_total,loss_main,loss_mpt_1,loss_mpt_2,lr"));
        assert_eq!(csv.lines().count(), 3);
    }
}
