//! Per-metric deltas between two metric reports.

use serde::{Deserialize, Serialize};

use super::render::fmt_signed;
use crate::error::{AuditError, Result};
use crate::metrics::MetricRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaStatus {
    Improve,
    Degrade,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b − a`
    pub delta: f64,
    pub higher_is_better: bool,
    pub status: DeltaStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowComparison {
    pub dataset: String,
    pub noise: String,
    pub score: String,
    pub method_a: String,
    pub method_b: String,
    pub deltas: Vec<MetricDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<RowComparison>,
}

type Getter = fn(&MetricRow) -> Option<f64>;

/// Metric name, direction, accessor.
pub const COMPARED_METRICS: [(&str, bool, Getter); 7] = [
    ("acc", true, |r| r.acc),
    ("near_auroc", true, |r| r.near_auroc),
    ("near_fpr95", false, |r| r.near_fpr95),
    ("far_auroc", true, |r| r.far_auroc),
    ("far_fpr95", false, |r| r.far_fpr95),
    ("ece", false, |r| r.ece),
    ("nll", false, |r| r.nll),
];

fn key(r: &MetricRow, with_method: bool) -> (String, String, String, String) {
    (
        if with_method { r.method.clone() } else { String::new() },
        r.dataset.clone(),
        r.noise.clone(),
        r.score_name.clone(),
    )
}

fn has_duplicates(rows: &[MetricRow]) -> bool {
    let mut keys: Vec<_> = rows.iter().map(|r| key(r, false)).collect();
    keys.sort();
    keys.windows(2).any(|w| w[0] == w[1])
}

/// Rows are matched on dataset, noise, and score; if either side has
/// several methods per setting the method name joins the key. Metrics
/// present on only one side are a schema mismatch.
pub fn cmd_compare(a: &[MetricRow], b: &[MetricRow]) -> Result<Comparison> {
    if a.is_empty() || b.is_empty() {
        return Err(AuditError::Empty("both reports need at least one row".into()));
    }
    let with_method = has_duplicates(a) || has_duplicates(b);
    let mut ka: Vec<_> = a.iter().map(|r| key(r, with_method)).collect();
    let mut kb: Vec<_> = b.iter().map(|r| key(r, with_method)).collect();
    ka.sort();
    kb.sort();
    if ka != kb {
        return Err(AuditError::InvalidArgument(
            "schema mismatch: reports cover different (dataset, noise, score) rows".into(),
        ));
    }
    let mut rows = Vec::with_capacity(a.len());
    for ra in a {
        let k = key(ra, with_method);
        let rb = b.iter().find(|r| key(r, with_method) == k).expect("key sets are equal");
        let mut deltas = Vec::new();
        for (name, higher, get) in COMPARED_METRICS {
            match (get(ra), get(rb)) {
                (Some(x), Some(y)) => {
                    let delta = y - x;
                    let status = if delta == 0.0 {
                        DeltaStatus::Unchanged
                    } else if (delta > 0.0) == higher {
                        DeltaStatus::Improve
                    } else {
                        DeltaStatus::Degrade
                    };
                    deltas.push(MetricDelta {
                        metric: name.into(),
                        a: x,
                        b: y,
                        delta,
                        higher_is_better: higher,
                        status,
                    });
                }
                (None, None) => {}
                _ => {
                    return Err(AuditError::InvalidArgument(format!(
                        "schema mismatch: {name} present in only one report for {} {}",
                        ra.dataset, ra.noise
                    )))
                }
            }
        }
        rows.push(RowComparison {
            dataset: ra.dataset.clone(),
            noise: ra.noise.clone(),
            score: ra.score_name.clone(),
            method_a: ra.method.clone(),
            method_b: rb.method.clone(),
            deltas,
        });
    }
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method A | Method B | Dataset | Noise | Score | Metric | A | B | Δ | Status |\n");
        out += "| --- | --- | --- | --- | --- | --- | --- | --- | --- | --- |\n";
        for r in &self.rows {
            for d in &r.deltas {
                let status = match d.status {
                    DeltaStatus::Improve => "improve",
                    DeltaStatus::Degrade => "degrade",
                    DeltaStatus::Unchanged => "unchanged",
                };
                out += &format!(
                    "| {} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {} | {} |\n",
                    r.method_a,
                    r.method_b,
                    r.dataset,
                    r.noise,
                    r.score,
                    d.metric,
                    d.a,
                    d.b,
                    fmt_signed(d.delta),
                    status
                );
            }
        }
        out
    }
}
