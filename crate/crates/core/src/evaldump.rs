//! Portable evaluation dumps.
//!
//! A dump is a directory holding `manifest.json` plus raw little-endian
//! binaries:
//!
//! | file           | dtype   | shape        | present when        |
//! |----------------|---------|--------------|---------------------|
//! | `labels.bin`   | int32   | n            | `has_labels`        |
//! | `logits.bin`   | float32 | n×K row-major| always              |
//! | `features.bin` | float32 | n×D row-major| always              |
//! | `head_w.bin`   | float32 | K×D row-major| `has_head`          |
//! | `head_b.bin`   | float32 | K            | `has_head`          |
//!
//! On disk everything is single precision; in memory values are `f64`.
//! [`EvalDump::new`] rounds inputs through `f32` so that every in-memory dump
//! is exactly representable on disk and `load(write(d)) == d` bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-entry tolerance of the head/logits consistency check.
pub const HEAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Fit,
    IdTest,
    Ood,
}

impl Role {
    pub fn requires_labels(self) -> bool {
        !matches!(self, Role::Ood)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Fit => "fit",
            Role::IdTest => "id_test",
            Role::Ood => "ood",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit" => Ok(Role::Fit),
            "id_test" => Ok(Role::IdTest),
            "ood" => Ok(Role::Ood),
            other => Err(AuditError::Manifest(format!("unknown role {other:?}"))),
        }
    }
}

/// Final linear layer: `logits = weights · features + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// K×D
    pub weights: DMatrix<f64>,
    /// K
    pub bias: DVector<f64>,
}

impl LinearHead {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Self {
        Self {
            weights: weights.map(quantize),
            bias: bias.map(quantize),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feat_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Logits for each row of an `n×D` feature matrix.
    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = features * self.weights.transpose();
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        z
    }
}

/// One frozen-checkpoint evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDump {
    pub name: String,
    pub role: Role,
    pub labels: Option<Vec<i32>>,
    /// n×K
    pub logits: DMatrix<f64>,
    /// n×D penultimate activations
    pub features: DMatrix<f64>,
    pub head: Option<LinearHead>,
    pub meta: BTreeMap<String, String>,
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

impl EvalDump {
    /// Builds a dump, rounding all real values to single precision.
    pub fn new(
        name: impl Into<String>,
        role: Role,
        labels: Option<Vec<i32>>,
        logits: DMatrix<f64>,
        features: DMatrix<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            role,
            labels,
            logits: logits.map(quantize),
            features: features.map(quantize),
            head: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_head(mut self, head: LinearHead) -> Self {
        self.head = Some(head);
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn n_samples(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Labels as class indices, or an error naming the operation that needs them.
    pub fn require_labels(&self, op: &str) -> Result<&[i32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| AuditError::MissingLabels(format!("{op} requires labels; dump {:?} has none", self.name)))
    }

    pub fn require_head(&self, op: &str) -> Result<&LinearHead> {
        self.head
            .as_ref()
            .ok_or_else(|| AuditError::MissingHead(format!("{op} requires classifier head; dump {:?} has none", self.name)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    RowCountMismatch,
    LabelsRequired,
    LabelsForbidden,
    LabelCountMismatch,
    LabelOutOfRange,
    NonFinite,
    HeadShape,
    HeadLogitsInconsistent,
}

impl ViolationCode {
    pub fn severity(self) -> Severity {
        match self {
            ViolationCode::HeadLogitsInconsistent => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub severity: Severity,
    pub message: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        let ok = violations.iter().all(|v| v.severity != Severity::Error);
        Self { ok, violations }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Warning)
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    /// `Err` carrying the first error-severity message, if any.
    pub fn into_result(self) -> Result<()> {
        match self.errors().next() {
            Some(v) => Err(AuditError::InvalidDump(v.message.clone())),
            None => Ok(()),
        }
    }
}

fn violation(code: ViolationCode, message: impl Into<String>, location: impl Into<String>) -> Violation {
    Violation {
        code,
        severity: code.severity(),
        message: message.into(),
        location: location.into(),
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// Lists every invariant violation of `dump` in a fixed order.
pub fn validate_dump(dump: &EvalDump) -> ValidationReport {
    let mut out = Vec::new();
    let n = dump.n_samples();
    let k = dump.n_classes();

    if dump.features.nrows() != n {
        out.push(violation(
            ViolationCode::RowCountMismatch,
            format!("features has {} rows but logits has {n}", dump.features.nrows()),
            "features",
        ));
    }

    match (&dump.labels, dump.role.requires_labels()) {
        (None, true) => out.push(violation(
            ViolationCode::LabelsRequired,
            format!("{} dump requires labels", dump.role),
            "labels",
        )),
        (Some(_), false) => out.push(violation(
            ViolationCode::LabelsForbidden,
            "OOD dump must not carry labels",
            "labels",
        )),
        _ => {}
    }

    if let Some(labels) = &dump.labels {
        if labels.len() != n {
            out.push(violation(
                ViolationCode::LabelCountMismatch,
                format!("labels has {} entries but n_samples is {n}", labels.len()),
                "labels",
            ));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y < 0 || y as usize >= k) {
            out.push(violation(
                ViolationCode::LabelOutOfRange,
                format!("label out of range: labels[{i}] = {y} not in [0,{k})"),
                format!("labels[{i}]"),
            ));
        }
    }

    let mut arrays: Vec<(&str, &DMatrix<f64>)> = vec![("logits", &dump.logits), ("features", &dump.features)];
    if let Some(h) = &dump.head {
        arrays.push(("head_w", &h.weights));
    }
    for (name, m) in arrays {
        if let Some((i, j)) = first_non_finite(m) {
            out.push(violation(
                ViolationCode::NonFinite,
                format!("non-finite value at {name}[{i},{j}]"),
                format!("{name}[{i},{j}]"),
            ));
        }
    }
    if let Some(h) = &dump.head {
        if let Some(i) = h.bias.iter().position(|b| !b.is_finite()) {
            out.push(violation(
                ViolationCode::NonFinite,
                format!("non-finite value at head_b[{i}]"),
                format!("head_b[{i}]"),
            ));
        }
    }

    if let Some(h) = &dump.head {
        let shape_ok = h.weights.nrows() == k && h.weights.ncols() == dump.feat_dim() && h.bias.len() == k;
        if !shape_ok {
            out.push(violation(
                ViolationCode::HeadShape,
                format!(
                    "head is {}x{} (+{} bias) but dump has K={k}, D={}",
                    h.weights.nrows(),
                    h.weights.ncols(),
                    h.bias.len(),
                    dump.feat_dim()
                ),
                "head",
            ));
        } else if dump.features.nrows() == n {
            let recomputed = h.apply(&dump.features);
            let worst = (0..n)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .map(|(i, j)| ((recomputed[(i, j)] - dump.logits[(i, j)]).abs(), i, j))
                .filter(|(d, _, _)| !(*d <= HEAD_TOLERANCE))
                .fold(None, |acc: Option<(f64, usize, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            if let Some((d, i, j)) = worst {
                out.push(violation(
                    ViolationCode::HeadLogitsInconsistent,
                    format!("head/logits inconsistency: max deviation {d:.3e} at logits[{i},{j}] exceeds {HEAD_TOLERANCE:e}"),
                    format!("logits[{i},{j}]"),
                ));
            }
        }
    }

    ValidationReport::from_violations(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub n_samples: usize,
    pub n_classes: usize,
    pub feat_dim: usize,
    pub role: Role,
    pub name: String,
    pub has_labels: bool,
    pub has_head: bool,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

const OPTIONAL_FILES: [&str; 3] = ["labels.bin", "head_w.bin", "head_b.bin"];

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| AuditError::io(path, e))?;
    f.write_all(bytes).map_err(|e| AuditError::io(path, e))
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn row_major_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    // nalgebra is column-major; transpose iteration yields row-major order
    f32_bytes(m.transpose().iter())
}

/// Writes `dump` under `dir` (created if needed). Invalid dumps are rejected
/// with the first error of their validation report.
pub fn write_dump(dump: &EvalDump, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let report = validate_dump(dump);
    report.into_result()?;

    fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
    for f in OPTIONAL_FILES {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| AuditError::io(&p, e))?;
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        n_samples: dump.n_samples(),
        n_classes: dump.n_classes(),
        feat_dim: dump.feat_dim(),
        role: dump.role,
        name: dump.name.clone(),
        has_labels: dump.labels.is_some(),
        has_head: dump.head.is_some(),
        meta: dump.meta.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;

    if let Some(labels) = &dump.labels {
        let bytes: Vec<u8> = labels.iter().flat_map(|y| y.to_le_bytes()).collect();
        write_file(&dir.join("labels.bin"), &bytes)?;
    }
    write_file(&dir.join("logits.bin"), &row_major_bytes(&dump.logits))?;
    write_file(&dir.join("features.bin"), &row_major_bytes(&dump.features))?;
    if let Some(h) = &dump.head {
        write_file(&dir.join("head_w.bin"), &row_major_bytes(&h.weights))?;
        write_file(&dir.join("head_b.bin"), &f32_bytes(h.bias.iter()))?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AuditError::io(path, e))
}

fn check_len(array: &str, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(AuditError::LengthMismatch {
            array: array.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn read_f32_matrix(dir: &Path, file: &str, array: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let bytes = read_file(&dir.join(file))?;
    check_len(array, &bytes, rows * cols * 4)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| AuditError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| AuditError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(AuditError::FormatVersion(manifest.format_version));
    }
    Ok(manifest)
}

/// Loads a dump directory written by [`write_dump`] (or any producer of the
/// same format) and validates it. Warnings are logged, errors returned.
pub fn load_dump(dir: impl AsRef<Path>) -> Result<EvalDump> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let (n, k, d) = (m.n_samples, m.n_classes, m.feat_dim);

    if m.role == Role::Ood && (m.has_labels || dir.join("labels.bin").exists()) {
        return Err(AuditError::InvalidDump("OOD dump must not carry labels".into()));
    }
    for (flag, files) in [(m.has_labels, &["labels.bin"][..]), (m.has_head, &["head_w.bin", "head_b.bin"][..])] {
        for f in files {
            if !flag && dir.join(f).exists() {
                return Err(AuditError::Manifest(format!("{f} present but manifest flag is false")));
            }
        }
    }

    let labels = if m.has_labels {
        let bytes = read_file(&dir.join("labels.bin"))?;
        check_len("labels", &bytes, n * 4)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        None
    };
    let logits = read_f32_matrix(dir, "logits.bin", "logits", n, k)?;
    let features = read_f32_matrix(dir, "features.bin", "features", n, d)?;
    let head = if m.has_head {
        let weights = read_f32_matrix(dir, "head_w.bin", "head_w", k, d)?;
        let bias = read_f32_matrix(dir, "head_b.bin", "head_b", k, 1)?;
        Some(LinearHead {
            weights,
            bias: DVector::from_column_slice(bias.as_slice()),
        })
    } else {
        None
    };

    let dump = EvalDump {
        name: m.name,
        role: m.role,
        labels,
        logits,
        features,
        head,
        meta: m.meta,
    };
    let report = validate_dump(&dump);
    for w in report.warnings() {
        log::warn!("{}: {}", dir.display(), w.message);
    }
    report.into_result()?;
    Ok(dump)
}
