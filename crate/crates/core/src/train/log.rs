//! Per-step loss log.

use std::path::Path;

use crate::{Error, Result};

/// One row per generator update; the columns depend on the configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl LossLog {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c == name)
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width matches header {:?}", self.columns);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// `name=value` pairs of the last row, skipping the bookkeeping columns.
    pub fn summary_last(&self) -> String {
        let Some(row) = self.rows.last() else {
            return String::new();
        };
        self.columns
            .iter()
            .zip(row)
            .skip(3)
            .map(|(c, v)| format!("{c}={v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{other:?}")),
        })?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format_value(*v)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Round-trip exact formatting so equal runs give byte-identical files.
fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}
