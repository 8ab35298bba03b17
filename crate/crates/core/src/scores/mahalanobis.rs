//! Class-conditional Gaussian detector with a shared covariance.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{Direction, ScoreVector};
use crate::error::{AuditError, Result};
use crate::evaldump::EvalDump;

#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisModel {
    /// K×D
    pub class_means: DMatrix<f64>,
    /// D×D, symmetric positive-definite
    pub shared_precision: DMatrix<f64>,
    pub shrinkage: f64,
}

/// Class means (K×D) and the pooled within-class covariance with the `1/N`
/// normalizer. Every class needs at least `min_per_class` rows.
pub fn class_means_and_pooled_cov(
    features: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    min_per_class: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(AuditError::Shape(format!("{} labels for {n} feature rows", labels.len())));
    }
    let mut counts = vec![0usize; n_classes];
    let mut means = DMatrix::zeros(n_classes, d);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(AuditError::InvalidArgument(format!("label {y} out of range for K={n_classes}")));
        }
        counts[y] += 1;
        let mut row = means.row_mut(y);
        row += features.row(i);
    }
    for (k, &c) in counts.iter().enumerate() {
        if c < min_per_class {
            return Err(AuditError::InvalidArgument(format!(
                "class {k} has {c} fit samples; at least {min_per_class} required"
            )));
        }
        let mut row = means.row_mut(k);
        row /= c as f64;
    }
    let mut centered = features.clone();
    for (i, &y) in labels.iter().enumerate() {
        let mut row = centered.row_mut(i);
        row -= means.row(y);
    }
    let cov = centered.transpose() * &centered / n.max(1) as f64;
    Ok((means, cov))
}

pub(crate) fn labels_as_indices(dump: &EvalDump, op: &str) -> Result<Vec<usize>> {
    let labels = dump.require_labels(op)?;
    labels
        .iter()
        .map(|&y| {
            usize::try_from(y).map_err(|_| AuditError::InvalidArgument(format!("negative label {y}")))
        })
        .collect()
}

/// `1e-3 · trace(Σ) / D` for the pooled within-class covariance of `fit`.
pub fn default_shrinkage(fit: &EvalDump) -> Result<f64> {
    let labels = labels_as_indices(fit, "mahalanobis")?;
    let (_, cov) = class_means_and_pooled_cov(&fit.features, &labels, fit.n_classes(), 2)?;
    Ok(1e-3 * cov.trace() / fit.feat_dim().max(1) as f64)
}

impl MahalanobisModel {
    /// Inverts `cov + shrinkage·I`; fails when that is not positive-definite.
    pub fn from_covariance(class_means: DMatrix<f64>, cov: &DMatrix<f64>, shrinkage: f64) -> Result<Self> {
        if !(shrinkage >= 0.0) {
            return Err(AuditError::InvalidArgument(format!("shrinkage must be >= 0, got {shrinkage}")));
        }
        let d = cov.nrows();
        let shrunk = cov + DMatrix::identity(d, d) * shrinkage;
        let chol = nalgebra::Cholesky::new(shrunk).ok_or_else(|| {
            AuditError::Singular("shared covariance is not positive-definite; use shrinkage > 0".into())
        })?;
        let p = chol.inverse();
        let shared_precision = (&p + p.transpose()) * 0.5;
        Ok(Self {
            class_means,
            shared_precision,
            shrinkage,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.nrows()
    }
}

pub fn fit_mahalanobis(fit: &EvalDump, shrinkage: f64) -> Result<MahalanobisModel> {
    let labels = labels_as_indices(fit, "mahalanobis")?;
    let (means, cov) = class_means_and_pooled_cov(&fit.features, &labels, fit.n_classes(), 2)?;
    MahalanobisModel::from_covariance(means, &cov, shrinkage)
}

/// Minimum over classes of the squared Mahalanobis distance (OOD-larger).
pub fn score_mahalanobis(model: &MahalanobisModel, features: &DMatrix<f64>) -> Result<ScoreVector> {
    let d = model.class_means.ncols();
    if features.ncols() != d {
        return Err(AuditError::Shape(format!("features have D={}, model has D={d}", features.ncols())));
    }
    let means: Vec<DVector<f64>> = (0..model.n_classes())
        .map(|k| model.class_means.row(k).transpose())
        .collect();
    let values = (0..features.nrows())
        .into_par_iter()
        .map(|i| {
            let x = features.row(i).transpose();
            means
                .iter()
                .map(|mu| {
                    let diff = &x - mu;
                    (diff.transpose() * &model.shared_precision * &diff)[(0, 0)]
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(ScoreVector::new("mahalanobis", Direction::OodLarger, values))
}
