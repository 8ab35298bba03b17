//! Representation-geometry probes over penultimate features.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::evaldump::EvalDump;
use crate::linalg::{column_means, covariance, select_rows, sym_eigen_desc, vstack};
use crate::metrics::predictions;
use crate::taxonomy::id_wrong_set;

/// `(Σλ)² / Σλ²` over the eigenvalues of the sample covariance.
pub fn participation_ratio(features: &DMatrix<f64>) -> Result<f64> {
    if features.nrows() < 2 {
        return Err(AuditError::InvalidArgument(format!(
            "participation ratio needs n >= 2, got {}",
            features.nrows()
        )));
    }
    let (values, _) = sym_eigen_desc(&covariance(features));
    let lam: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = lam.iter().sum();
    let sq: f64 = lam.iter().map(|v| v * v).sum();
    if !(total > 0.0) || !(sq > 0.0) {
        return Err(AuditError::Degenerate("degenerate population: zero total variance".into()));
    }
    Ok(total * total / sq)
}

/// Participation ratio of each class subset (`None` where it is undefined).
pub fn participation_ratio_per_class(features: &DMatrix<f64>, labels: &[usize], n_classes: usize) -> Vec<Option<f64>> {
    (0..n_classes)
        .map(|k| {
            let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == k).map(|(i, _)| i).collect();
            participation_ratio(&select_rows(features, &idx)).ok()
        })
        .collect()
}

pub const DEFAULT_K_MIN: usize = 10;
pub const DEFAULT_K_MAX: usize = 20;

/// Removes exact duplicate rows, keeping first occurrences.
fn dedup_rows(features: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let mut seen = HashSet::new();
    let keep: Vec<usize> = (0..features.nrows())
        .filter(|&i| {
            let key: Vec<u64> = features.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
            seen.insert(key)
        })
        .collect();
    let removed = features.nrows() - keep.len();
    (select_rows(features, &keep), removed)
}

/// Levina–Bickel maximum-likelihood intrinsic dimension, averaged over
/// points and then over neighbourhood sizes `k_min..=k_max`.
pub fn intrinsic_dim_mle(features: &DMatrix<f64>, k_min: usize, k_max: usize) -> Result<f64> {
    if k_min < 2 || k_max < k_min {
        return Err(AuditError::InvalidArgument(format!(
            "need k_max >= k_min >= 2, got k_min={k_min}, k_max={k_max}"
        )));
    }
    let (x, removed) = dedup_rows(features);
    if removed > 0 {
        log::warn!("intrinsic_dim_mle: collapsed {removed} duplicate points");
    }
    let n = x.nrows();
    if n <= k_max {
        return Err(AuditError::InvalidArgument(format!("need n > k_max; have {n} distinct points, k_max={k_max}")));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();

    // per point: squared distances to its k_max nearest neighbours, ascending
    let neighbours: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d2: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            d2.select_nth_unstable_by(k_max - 1, f64::total_cmp);
            d2.truncate(k_max);
            d2.sort_by(f64::total_cmp);
            d2
        })
        .collect();

    let mut per_k = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let mean: f64 = neighbours
            .iter()
            .map(|d2| {
                let log_tk = 0.5 * d2[k - 1].ln();
                let s: f64 = d2[..k - 1].iter().map(|v| log_tk - 0.5 * v.ln()).sum();
                (k - 1) as f64 / s
            })
            .sum::<f64>()
            / n as f64;
        per_k.push(mean);
    }
    let estimate = per_k.iter().sum::<f64>() / per_k.len() as f64;
    if !estimate.is_finite() || estimate <= 0.0 {
        return Err(AuditError::Degenerate(format!(
            "intrinsic dimension estimate is {estimate}; neighbour distances are degenerate"
        )));
    }
    Ok(estimate)
}

/// Class centroids (K×D) from ID-correct features grouped by predicted class.
pub fn class_centroids(features: &DMatrix<f64>, preds: &[usize], n_classes: usize) -> Result<DMatrix<f64>> {
    if preds.len() != features.nrows() {
        return Err(AuditError::Shape(format!("{} predictions for {} rows", preds.len(), features.nrows())));
    }
    let mut sums = DMatrix::zeros(n_classes, features.ncols());
    let mut counts = vec![0usize; n_classes];
    for (i, &p) in preds.iter().enumerate() {
        if p >= n_classes {
            return Err(AuditError::InvalidArgument(format!("prediction {p} out of range")));
        }
        counts[p] += 1;
        let mut row = sums.row_mut(p);
        row += features.row(i);
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(AuditError::InvalidArgument(format!("class {k} has no ID-correct samples")));
        }
        let mut row = sums.row_mut(k);
        row /= c as f64;
    }
    Ok(sums)
}

/// Mean over rows of the unit vector from the nearest centroid to the row.
pub fn mean_drift(centroids: &DMatrix<f64>, features: &DMatrix<f64>) -> DVector<f64> {
    let mut acc = DVector::zeros(features.ncols());
    for row in features.row_iter() {
        let x = row.transpose();
        let nearest = (0..centroids.nrows())
            .map(|k| (k, (&x - centroids.row(k).transpose()).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(k, _)| k)
            .unwrap_or(0);
        let v = &x - centroids.row(nearest).transpose();
        let norm = v.norm();
        if norm > 0.0 {
            acc += v / norm;
        }
    }
    if features.nrows() > 0 {
        acc /= features.nrows() as f64;
    }
    acc
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(AuditError::Degenerate("mean drift vanishes; cosine undefined".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

pub const DRIFT_LABEL: &str = "drift-alignment (artifact definition)";

/// Cosine between the mean nearest-centroid drift of ID-wrong samples and
/// that of OOD samples.
pub fn drift_alignment(
    id_correct: &DMatrix<f64>,
    correct_preds: &[usize],
    id_wrong: &DMatrix<f64>,
    ood: &DMatrix<f64>,
    n_classes: usize,
) -> Result<f64> {
    if id_wrong.nrows() == 0 {
        return Err(AuditError::Empty("ID-wrong set is empty".into()));
    }
    if ood.nrows() == 0 {
        return Err(AuditError::Empty("OOD set is empty".into()));
    }
    let centroids = class_centroids(id_correct, correct_preds, n_classes)?;
    cosine(&mean_drift(&centroids, id_wrong), &mean_drift(&centroids, ood))
}

/// Projects each population onto the top two principal axes of the pooled
/// data (sign convention: largest-magnitude loading positive).
pub fn pca_project_2d(populations: &[&DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let pooled = vstack(populations);
    if pooled.nrows() < 3 {
        return Err(AuditError::InvalidArgument(format!("need >= 3 pooled points, got {}", pooled.nrows())));
    }
    if pooled.ncols() < 2 {
        return Err(AuditError::Degenerate("rank-deficient: fewer than 2 feature dimensions".into()));
    }
    let (values, vectors) = sym_eigen_desc(&covariance(&pooled));
    if !(values[0] > 0.0) || !(values[1] > 1e-12 * values[0]) {
        return Err(AuditError::Degenerate("rank-deficient: pooled data has rank < 2".into()));
    }
    let axes = vectors.columns(0, 2).clone_owned();
    let mean = column_means(&pooled);
    Ok(populations
        .iter()
        .map(|p| {
            let mut c = (*p).clone();
            for mut row in c.row_iter_mut() {
                row -= mean.transpose();
            }
            c * &axes
        })
        .collect())
}

/// CSV with header `population,x,y`.
pub fn write_projection_csv(names: &[&str], projections: &[DMatrix<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["population", "x", "y"])?;
    for (name, p) in names.iter().zip(projections) {
        for row in p.row_iter() {
            w.write_record([name.to_string(), row[0].to_string(), row[1].to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| AuditError::Serde(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| AuditError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryOptions {
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self {
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationGeometry {
    pub name: String,
    pub n: usize,
    pub participation_ratio: Option<f64>,
    pub intrinsic_dim_mle: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub populations: Vec<PopulationGeometry>,
    pub drift_alignment_label: String,
    pub drift_alignment_cos: Option<f64>,
    pub drift_alignment_note: Option<String>,
    /// ID-correct participation ratio per predicted class.
    pub per_class_participation_ratio: Vec<Option<f64>>,
    /// K×D centroids of ID-correct features by predicted class (rows).
    pub centroid_table: Vec<Vec<f64>>,
}

fn population(name: &str, features: &DMatrix<f64>, opts: &GeometryOptions) -> PopulationGeometry {
    let mut notes = Vec::new();
    let pr = participation_ratio(features).map_err(|e| notes.push(format!("participation_ratio: {e}"))).ok();
    let mle = intrinsic_dim_mle(features, opts.k_min, opts.k_max)
        .map_err(|e| notes.push(format!("intrinsic_dim_mle: {e}")))
        .ok();
    PopulationGeometry {
        name: name.into(),
        n: features.nrows(),
        participation_ratio: pr,
        intrinsic_dim_mle: mle,
        notes,
    }
}

/// Geometry of ID-correct, ID-wrong, and OOD populations. Individual
/// estimators that cannot run leave `None` plus a note.
pub fn geometry_report(id_dump: &EvalDump, ood_features: &DMatrix<f64>, opts: &GeometryOptions) -> Result<GeometryReport> {
    let labels = id_dump.require_labels("geometry")?;
    let wrong = id_wrong_set(&id_dump.logits, labels)?;
    let wrong_set: HashSet<usize> = wrong.iter().copied().collect();
    let correct: Vec<usize> = (0..id_dump.n_samples()).filter(|i| !wrong_set.contains(i)).collect();
    let preds = predictions(&id_dump.logits);
    let correct_feats = select_rows(&id_dump.features, &correct);
    let correct_preds: Vec<usize> = correct.iter().map(|&i| preds[i]).collect();
    let wrong_feats = select_rows(&id_dump.features, &wrong);
    let k = id_dump.n_classes();

    let populations = vec![
        population("id_correct", &correct_feats, opts),
        population("id_wrong", &wrong_feats, opts),
        population("ood", ood_features, opts),
    ];
    let (cos, note) = match drift_alignment(&correct_feats, &correct_preds, &wrong_feats, ood_features, k) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let centroid_table = class_centroids(&correct_feats, &correct_preds, k)
        .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
        .unwrap_or_default();
    Ok(GeometryReport {
        populations,
        drift_alignment_label: DRIFT_LABEL.into(),
        drift_alignment_cos: cos,
        drift_alignment_note: note,
        per_class_participation_ratio: participation_ratio_per_class(&correct_feats, &correct_preds, k),
        centroid_table,
    })
}
