//! Reading and writing metric rows as CSV and JSON.

use std::fs;
use std::path::Path;

use crate::error::{AuditError, Result};
use crate::metrics::MetricRow;

/// Column order of `metrics.csv`.
pub const METRIC_COLUMNS: [&str; 11] = [
    "method",
    "dataset",
    "noise",
    "score",
    "acc",
    "near_auroc",
    "near_fpr95",
    "far_auroc",
    "far_fpr95",
    "ece",
    "nll",
];

/// Floats are written in shortest round-trip form, so parsing back yields
/// the same values bit for bit.
pub fn rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| AuditError::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AuditError::Serde(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRIC_COLUMNS {
        return Err(AuditError::InvalidArgument(format!(
            "unexpected metric columns: {}",
            header.join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(AuditError::from)).collect()
}

pub fn write_rows_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, rows_to_csv(rows)?).map_err(|e| AuditError::io(path, e))
}

pub fn write_rows_json(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    write_json(rows, path)
}

/// Loads rows from `.csv` or `.json` by extension.
pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        rows_from_csv(&text)
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AuditError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_missing_cells() {
        let mut a = MetricRow::new("m", "d,x", "sym 0.2", "energy");
        a.acc = Some(97.6);
        a.far_auroc = Some(0.1 + 0.2);
        a.ece = Some(1e-17);
        let b = MetricRow::new("n", "d", "clean", "msp");
        let text = rows_to_csv(&[a.clone(), b.clone()]).unwrap();
        assert!(text.starts_with("method,dataset,noise,score,acc,"));
        assert_eq!(rows_from_csv(&text).unwrap(), vec![a, b]);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(rows_from_csv("a,b\n1,2\n").is_err());
    }
}
