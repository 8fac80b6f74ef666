//! `report.json` and `points.csv`. Output is a pure function of the config:
//! no timestamps, no hash-map iteration order, fixed float formatting.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct AssertionRecord {
    pub name: String,
    pub passed: bool,
    pub observed: Value,
    pub expected: String,
}

impl AssertionRecord {
    pub fn new(name: impl Into<String>, passed: bool, observed: impl Serialize, expected: impl Into<String>) -> Self {
        AssertionRecord {
            name: name.into(),
            passed,
            observed: serde_json::to_value(observed).unwrap_or(Value::Null),
            expected: expected.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        let kind = match e {
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::OutsideDomain { .. } => "outside-domain",
            Error::NonConvergence { .. } => "non-convergence",
            Error::MissingCertificate(_) => "missing-certificate",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::UnknownSubequation(_) => "unknown-subequation",
            Error::UnknownFamily(_) => "unknown-family",
            Error::BoundaryMinimizer { .. } => "boundary-minimizer",
            Error::ValidationFailed(_) => "validation-failed",
            Error::PreconditionViolated(_) => "precondition-violated",
            Error::ContractionViolated { .. } => "contraction-violated",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        };
        ErrorRecord {
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub command: String,
    pub version: &'static str,
    /// Echo of the parsed config, defaults filled in.
    pub config: Value,
    pub summary: Value,
    pub assertions: Vec<AssertionRecord>,
    pub passed: bool,
    pub error: Option<ErrorRecord>,
}

impl ExperimentReport {
    pub fn new(command: &str, config: Value) -> Self {
        ExperimentReport {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config,
            summary: Value::Null,
            assertions: Vec::new(),
            passed: false,
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        ensure_parent(path)?;
        std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// Rows of per-point records under a fixed header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl PointTable {
    pub fn new(header: Vec<String>) -> Self {
        PointTable {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
        ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}

/// `name_0, …, name_{k−1}`.
pub fn indexed(name: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{name}_{i}")).collect()
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn nums(v: &[f64]) -> Vec<String> {
    v.iter().copied().map(num).collect()
}

/// Pads `v` to `k` entries with blanks (failed points carry no coordinates).
pub fn nums_padded(v: &[f64], k: usize) -> Vec<String> {
    let mut out = nums(v);
    out.resize(k, String::new());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02e23] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(opt_num(None), "");
        assert_eq!(nums_padded(&[1.0], 3), vec!["1e0".to_string(), String::new(), String::new()]);
    }

    #[test]
    fn table_writes_header_then_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = PointTable::new(indexed("x", 2));
        t.push(nums(&[1.5, -2.0]));
        t.write(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "x_0,x_1\n1.5e0,-2e0\n");
    }
}
