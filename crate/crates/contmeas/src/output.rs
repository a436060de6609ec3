//! CSV and JSON writers. CSV files start with `#` metadata lines:
//!
//! ```text
//! # contmeas 0.1.0
//! # config: {...}
//! # seed: 20210607
//! # summary: {...}
//! tau,q1,q2,...
//! ```
//!
//! JSON files hold one object `{"meta": {...}, "data": {"columns", "rows"}}`.
//! Missing values (NaN) are empty CSV fields and JSON nulls.

use std::io::{BufRead, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::config::{Format, RunConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub table: Table,
    pub summary: Map<String, Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Metadata(String),
}

fn field(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        // Display is the shortest representation that round-trips
        x.to_string()
    }
}

pub fn meta(cfg: &RunConfig, summary: &Map<String, Value>) -> Value {
    json!({
        "version": cfg.version,
        "config": cfg,
        "seed": cfg.command.seed(),
        "summary": summary,
    })
}

pub fn write_report<W: Write>(mut w: W, cfg: &RunConfig, report: &Report) -> Result<(), OutputError> {
    match cfg.format {
        Format::Csv => {
            writeln!(w, "# contmeas {}", cfg.version)?;
            writeln!(w, "# config: {}", serde_json::to_string(cfg)?)?;
            match cfg.command.seed() {
                Some(s) => writeln!(w, "# seed: {s}")?,
                None => writeln!(w, "# seed: none")?,
            }
            writeln!(w, "# summary: {}", serde_json::to_string(&report.summary)?)?;
            let mut out = csv::Writer::from_writer(w);
            out.write_record(&report.table.columns)?;
            for row in &report.table.rows {
                out.write_record(row.iter().map(|&x| field(x)))?;
            }
            out.flush()?;
        }
        Format::Json => {
            let doc = json!({
                "meta": meta(cfg, &report.summary),
                "data": { "columns": report.table.columns, "rows": report.table.rows },
            });
            serde_json::to_writer_pretty(&mut w, &doc)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Recovers the run configuration embedded in an output file of either format.
pub fn read_config(path: &Path) -> Result<RunConfig, OutputError> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.starts_with('#') {
        for line in std::iter::once(Ok(first)).chain(reader.lines()) {
            let line = line?;
            if !line.starts_with('#') {
                break;
            }
            if let Some(rest) = line.strip_prefix("# config: ") {
                return Ok(serde_json::from_str(rest)?);
            }
        }
        Err(OutputError::Metadata(format!("{} has no config line", path.display())))
    } else {
        let mut text = first;
        std::io::Read::read_to_string(&mut reader, &mut text)?;
        let doc: Value = serde_json::from_str(&text)?;
        let cfg = doc
            .get("meta")
            .and_then(|m| m.get("config"))
            .ok_or_else(|| OutputError::Metadata(format!("{} has no meta.config", path.display())))?;
        Ok(serde_json::from_value(cfg.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{figure, RunConfig};

    fn report() -> Report {
        let mut t = Table::new(&["tau", "x"]);
        t.push(vec![0.0, 0.1 + 0.2]);
        t.push(vec![1.0, f64::NAN]);
        let mut summary = Map::new();
        summary.insert("k".into(), json!(1.5));
        Report { table: t, summary }
    }

    #[test]
    fn csv_layout_and_config_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let cfg = RunConfig::new(figure(3).unwrap());
        write_report(std::fs::File::create(&path).unwrap(), &cfg, &report()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# contmeas "));
        assert!(lines[1].starts_with("# config: "));
        assert_eq!(lines[2], "# seed: 20210607");
        assert_eq!(lines[4], "tau,x");
        assert_eq!(lines[5], "0,0.30000000000000004");
        assert_eq!(lines[6], "1,");
        assert_eq!(read_config(&path).unwrap(), cfg);
    }

    #[test]
    fn json_layout_and_config_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        let mut cfg = RunConfig::new(figure(5).unwrap());
        cfg.format = Format::Json;
        write_report(std::fs::File::create(&path).unwrap(), &cfg, &report()).unwrap();
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc["data"]["columns"], json!(["tau", "x"]));
        assert_eq!(doc["data"]["rows"][1][1], Value::Null);
        assert_eq!(doc["meta"]["summary"]["k"], json!(1.5));
        assert_eq!(read_config(&path).unwrap(), cfg);
    }
}
