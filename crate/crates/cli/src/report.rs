//! JSON and CSV report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::record_file::{hex, RecordHeader};

pub const REPORT_VERSION: u32 = 1;

/// One line of a flat report table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub name: String,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl Row {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            ci_low: None,
            ci_high: None,
        }
    }

    pub fn with_ci(name: impl Into<String>, value: f64, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            value,
            ci_low: Some(low),
            ci_high: Some(high),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RecordInfo {
    pub path: String,
    pub state_digest: String,
    pub n_shots: usize,
    pub seed: u64,
    pub gain: f64,
    pub alpha_c: f64,
    pub filter_seed: u64,
}

impl RecordInfo {
    pub fn new(path: &Path, h: &RecordHeader) -> Self {
        Self {
            path: path.display().to_string(),
            state_digest: hex(&h.digest),
            n_shots: h.n_shots,
            seed: h.meta.seed,
            gain: h.meta.gain,
            alpha_c: h.meta.alpha_c,
            filter_seed: h.meta.filter_seed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub kind: String,
    pub version: u32,
    /// Every parameter the command resolved, including the experiment
    /// config when one was given.
    pub config: Value,
    pub record: Option<RecordInfo>,
    pub rows: Vec<Row>,
    pub detail: Value,
}

/// Shortest round-trip form, switching to exponent notation for very small
/// or large magnitudes. Non-finite values become empty cells.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if !v.is_finite() {
        String::new()
    } else if a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn rows_csv(rows: &[Row]) -> String {
    let mut s = String::from("name,value,ci_low,ci_high\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.name, fmt_f64(r.value), fmt_opt(r.ci_low), fmt_opt(r.ci_high));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| CliError::Model(format!("serialising report: {e}")))
}

pub fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Model(format!("serialising report: {e}")))
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.csv`.
pub fn write_report(dir: &Path, stem: &str, report: &Report) -> CliResult<(PathBuf, PathBuf)> {
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    write_text(&json, &to_json(report)?)?;
    write_text(&csv, &rows_csv(&report.rows))?;
    Ok((json, csv))
}

/// A table with a fixed header, written as CSV with missing values left
/// empty, or as JSON objects with missing values null.
#[derive(Clone, Debug, Default)]
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<Cell>>,
}

#[derive(Clone, Debug)]
pub enum Cell {
    Num(f64),
    Opt(Option<f64>),
    Int(usize),
    Flag(bool),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) => fmt_f64(*v),
            Cell::Opt(v) => fmt_opt(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Flag(b) => b.to_string(),
            Cell::Text(t) => csv_escape(t),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) | Cell::Opt(Some(v)) if v.is_finite() => Value::from(*v),
            Cell::Num(_) | Cell::Opt(_) => Value::Null,
            Cell::Int(v) => Value::from(*v),
            Cell::Flag(b) => Value::from(*b),
            Cell::Text(t) if t.is_empty() => Value::Null,
            Cell::Text(t) => Value::from(t.as_str()),
        }
    }
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: Vec<Cell>) {
        assert_eq!(cells.len(), self.header.len(), "row width");
        self.rows.push(cells);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Numeric value of `column` in each row, `None` where missing.
    pub fn column(&self, column: &str) -> Vec<Option<f64>> {
        let Some(k) = self.header.iter().position(|h| *h == column) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .map(|r| match &r[k] {
                Cell::Num(v) | Cell::Opt(Some(v)) => Some(*v),
                Cell::Int(v) => Some(*v as f64),
                _ => None,
            })
            .collect()
    }

    pub fn text_column(&self, column: &str) -> Vec<String> {
        let Some(k) = self.header.iter().position(|h| *h == column) else {
            return Vec::new();
        };
        self.rows.iter().map(|r| r[k].csv()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::csv).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|r| {
                    Value::Object(
                        self.header
                            .iter()
                            .zip(r)
                            .map(|(h, c)| (h.to_string(), c.json()))
                            .collect(),
                    )
                })
                .collect(),
        )
    }
}

fn csv_escape(t: &str) -> String {
    if t.contains([',', '"', '\n']) {
        format!("\"{}\"", t.replace('"', "\"\""))
    } else {
        t.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_leave_missing_intervals_empty() {
        let csv = rows_csv(&[Row::new("a", 1.5), Row::with_ci("b", 0.25, 0.125, 0.5)]);
        assert_eq!(csv, "name,value,ci_low,ci_high\na,1.5,,\nb,0.25,0.125,0.5\n");
    }

    #[test]
    fn small_values_use_exponents() {
        assert_eq!(fmt_f64(3.5e-11), "3.5e-11");
        assert_eq!(fmt_f64(0.25), "0.25");
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(f64::NAN), "");
    }

    #[test]
    fn table_escapes_text() {
        let mut t = Table::new(&["g", "errors"]);
        t.push(vec![Cell::Num(1.1), Cell::Text("bad, \"x\"".into())]);
        assert_eq!(t.to_csv(), "g,errors\n1.1,\"bad, \"\"x\"\"\"\n");
    }
}
