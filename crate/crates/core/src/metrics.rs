//! Rank-based detection metrics and calibration diagnostics.
//!
//! OOD is the positive class everywhere: AUROC is `Pr(s_ood > s_id) + ½ Pr(tie)`
//! over OOD-larger scores.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::linalg::{argmax, logsumexp, midranks, percentile_linear, row_vec, softmax};
use crate::scores::{Direction, ScoreVector};

fn check_pair(id: &ScoreVector, ood: &ScoreVector) -> Result<()> {
    for (side, sv) in [("id", id), ("ood", ood)] {
        if sv.direction != Direction::OodLarger {
            return Err(AuditError::InvalidArgument(format!(
                "{side} scores ({}) are {}; orient to ood_larger first",
                sv.score_name, sv.direction
            )));
        }
        if sv.is_empty() {
            return Err(AuditError::Empty(format!("{side} score set is empty")));
        }
    }
    Ok(())
}

/// Rank-sum (Mann–Whitney) AUROC with midranks for ties.
pub fn auroc(id: &ScoreVector, ood: &ScoreVector) -> Result<f64> {
    check_pair(id, ood)?;
    Ok(auroc_values(&id.values, &ood.values))
}

/// AUROC on raw OOD-larger values; both slices must be nonempty.
pub fn auroc_values(id: &[f64], ood: &[f64]) -> f64 {
    let n = id.len() as f64;
    let m = ood.len() as f64;
    let pooled: Vec<f64> = id.iter().chain(ood).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum: f64 = ranks[id.len()..].iter().sum();
    let u = rank_sum - m * (m + 1.0) / 2.0;
    u / (n * m)
}

/// Which 95% operating point FPR95 refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FprConvention {
    /// Threshold accepts 95% of ID; report the fraction of OOD accepted.
    #[default]
    IdAcceptance,
    /// Threshold flags 95% of OOD; report the fraction of ID flagged.
    OodRecall,
}

pub const MIN_PERCENTILE_SAMPLES: usize = 20;

pub fn fpr_at_95_tpr(id: &ScoreVector, ood: &ScoreVector) -> Result<f64> {
    fpr_at_95_tpr_with(id, ood, FprConvention::IdAcceptance)
}

pub fn fpr_at_95_tpr_with(id: &ScoreVector, ood: &ScoreVector, convention: FprConvention) -> Result<f64> {
    check_pair(id, ood)?;
    match convention {
        FprConvention::IdAcceptance => {
            if id.len() < MIN_PERCENTILE_SAMPLES {
                return Err(AuditError::InvalidArgument(format!(
                    "unstable percentile: {} ID samples, need at least {MIN_PERCENTILE_SAMPLES}",
                    id.len()
                )));
            }
            let tau = percentile_linear(&id.values, 95.0);
            let accepted = ood.values.iter().filter(|&&s| s <= tau).count();
            Ok(accepted as f64 / ood.len() as f64)
        }
        FprConvention::OodRecall => {
            if ood.len() < MIN_PERCENTILE_SAMPLES {
                return Err(AuditError::InvalidArgument(format!(
                    "unstable percentile: {} OOD samples, need at least {MIN_PERCENTILE_SAMPLES}",
                    ood.len()
                )));
            }
            let tau = percentile_linear(&ood.values, 5.0);
            let flagged = id.values.iter().filter(|&&s| s >= tau).count();
            Ok(flagged as f64 / id.len() as f64)
        }
    }
}

fn check_labels(logits: &DMatrix<f64>, labels: &[i32]) -> Result<()> {
    if labels.len() != logits.nrows() {
        return Err(AuditError::Shape(format!("{} labels for {} logit rows", labels.len(), logits.nrows())));
    }
    if logits.nrows() == 0 {
        return Err(AuditError::Empty("no samples".into()));
    }
    let k = logits.ncols();
    if let Some(y) = labels.iter().find(|&&y| y < 0 || y as usize >= k) {
        return Err(AuditError::InvalidArgument(format!("label {y} out of range for K={k}")));
    }
    Ok(())
}

/// Per-sample argmax predictions, ties to the lowest class index.
pub fn predictions(logits: &DMatrix<f64>) -> Vec<usize> {
    (0..logits.nrows()).map(|i| argmax(&row_vec(logits, i))).collect()
}

/// Top-1 accuracy in percent.
pub fn accuracy(logits: &DMatrix<f64>, labels: &[i32]) -> Result<f64> {
    check_labels(logits, labels)?;
    let correct = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p == y as usize)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// Expected calibration error over equal-width MSP bins on (0,1],
/// right-inclusive.
pub fn ece(logits: &DMatrix<f64>, labels: &[i32], n_bins: usize) -> Result<f64> {
    check_labels(logits, labels)?;
    if n_bins == 0 {
        return Err(AuditError::InvalidArgument("n_bins must be >= 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(&row_vec(logits, i));
        let pred = argmax(&p);
        let conf = p[pred];
        let b = ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y as usize {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (correct[b] as f64 / c - conf_sum[b] / c).abs()
        })
        .sum())
}

/// Mean negative log softmax probability of the true class.
pub fn nll(logits: &DMatrix<f64>, labels: &[i32]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = row_vec(logits, i);
            logsumexp(z.iter().copied()) - z[y as usize]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(AuditError::Shape(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(AuditError::InvalidArgument("spearman needs at least 3 pairs".into()));
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AuditError::Degenerate("constant input has no rank correlation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One row of the unified benchmark. Percent-valued except `ece` (fraction)
/// and `nll`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub dataset: String,
    pub noise: String,
    #[serde(rename = "score")]
    pub score_name: String,
    pub acc: Option<f64>,
    pub near_auroc: Option<f64>,
    pub near_fpr95: Option<f64>,
    pub far_auroc: Option<f64>,
    pub far_fpr95: Option<f64>,
    pub ece: Option<f64>,
    pub nll: Option<f64>,
}

impl MetricRow {
    pub fn new(method: &str, dataset: &str, noise: &str, score_name: &str) -> Self {
        Self {
            method: method.into(),
            dataset: dataset.into(),
            noise: noise.into(),
            score_name: score_name.into(),
            acc: None,
            near_auroc: None,
            near_fpr95: None,
            far_auroc: None,
            far_fpr95: None,
            ece: None,
            nll: None,
        }
    }

    /// Checks value ranges; returns the first offending field.
    pub fn validate(&self) -> Result<()> {
        let percents = [
            ("acc", self.acc),
            ("near_auroc", self.near_auroc),
            ("near_fpr95", self.near_fpr95),
            ("far_auroc", self.far_auroc),
            ("far_fpr95", self.far_fpr95),
        ];
        for (name, v) in percents {
            if let Some(v) = v {
                if !(0.0..=100.0).contains(&v) {
                    return Err(AuditError::InvalidArgument(format!("{name} = {v} outside [0,100]")));
                }
            }
        }
        if let Some(e) = self.ece {
            if !(0.0..=1.0).contains(&e) {
                return Err(AuditError::InvalidArgument(format!("ece = {e} outside [0,1]")));
            }
        }
        Ok(())
    }
}
