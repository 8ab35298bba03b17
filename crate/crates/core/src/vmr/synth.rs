//! Trusted-batch selection, class-conditional Gaussians, and virtual outliers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::scores::class_means_and_pooled_cov;

/// Per class, the `⌊keep_fraction·n_class⌋` indices with the smallest loss,
/// ties broken by index. The result is sorted ascending.
pub fn select_trusted(losses: &[f64], labels: &[usize], n_classes: usize, keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(AuditError::InvalidArgument(format!("keep_fraction must be in (0,1], got {keep_fraction}")));
    }
    if losses.len() != labels.len() {
        return Err(AuditError::Shape(format!("{} losses for {} labels", losses.len(), labels.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(AuditError::InvalidArgument(format!("label {y} out of range for K={n_classes}")));
        }
        by_class[y].push(i);
    }
    let mut keep = Vec::new();
    for (k, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(AuditError::Empty(format!("class {k} has no samples")));
        }
        let n_keep = (keep_fraction * idx.len() as f64).floor() as usize;
        idx.sort_by(|&i, &j| losses[i].total_cmp(&losses[j]).then(i.cmp(&j)));
        keep.extend_from_slice(&idx[..n_keep]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Class means with one shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank {
    /// K×D
    pub means: DMatrix<f64>,
    /// D×D, pooled within-class covariance plus `shrinkage·I`
    pub covariance: DMatrix<f64>,
    pub shrinkage: f64,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianBank {
    pub fn n_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Gaussian log density of `x` under class `k`.
    pub fn log_likelihood(&self, x: &DVector<f64>, k: usize) -> f64 {
        let diff = x - self.means.row(k).transpose();
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a nonzero diagonal");
        -0.5 * z.norm_squared() + self.log_norm
    }
}

pub fn fit_class_gaussians(
    features: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    shrinkage: f64,
) -> Result<GaussianBank> {
    if !(shrinkage >= 0.0) {
        return Err(AuditError::InvalidArgument(format!("shrinkage must be >= 0, got {shrinkage}")));
    }
    let (means, mut cov) = class_means_and_pooled_cov(features, labels, n_classes, 2)?;
    let d = cov.nrows();
    for i in 0..d {
        cov[(i, i)] += shrinkage;
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| AuditError::Singular("class covariance is singular; use shrinkage epsilon > 0".into()))?
        .l();
    let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
    Ok(GaussianBank {
        means,
        covariance: cov,
        shrinkage,
        chol,
        log_norm,
    })
}

/// How candidate virtual outliers are proposed before the low-likelihood filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisRule {
    /// Draw from each class Gaussian.
    #[default]
    LowLikelihood,
    /// Draw around the midpoint between the class mean and a random other
    /// class mean, with the shared covariance.
    MidpointJitter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualBatch {
    /// (K·t)×D, grouped by class, draw order preserved within a class
    pub features: DMatrix<f64>,
    pub source_class: Vec<usize>,
    /// Log-likelihoods under the source class, per class
    pub kept_log_likelihood: Vec<Vec<f64>>,
    pub discarded_log_likelihood: Vec<Vec<f64>>,
}

pub fn sample_virtual_outliers(bank: &GaussianBank, keep: usize, pool: usize, seed: u64) -> Result<VirtualBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_virtual_outliers_with(bank, keep, pool, SynthesisRule::LowLikelihood, &mut rng)
}

/// Draws `pool` candidates per class and keeps the `keep` with the lowest
/// log-likelihood under their own class.
pub fn sample_virtual_outliers_with(
    bank: &GaussianBank,
    keep: usize,
    pool: usize,
    rule: SynthesisRule,
    rng: &mut impl Rng,
) -> Result<VirtualBatch> {
    if keep > pool {
        return Err(AuditError::InvalidArgument(format!("keep count {keep} exceeds pool size {pool}")));
    }
    let k_classes = bank.n_classes();
    let d = bank.dim();
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(keep * k_classes);
    let mut source_class = Vec::with_capacity(keep * k_classes);
    let mut kept_ll = Vec::with_capacity(k_classes);
    let mut discarded_ll = Vec::with_capacity(k_classes);
    for k in 0..k_classes {
        let mu_k = bank.means.row(k).transpose();
        let candidates: Vec<DVector<f64>> = (0..pool)
            .map(|_| {
                let center = match rule {
                    SynthesisRule::LowLikelihood => mu_k.clone(),
                    SynthesisRule::MidpointJitter if k_classes > 1 => {
                        let r = rng.random_range(0..k_classes - 1);
                        let other = if r >= k { r + 1 } else { r };
                        (&mu_k + bank.means.row(other).transpose()) * 0.5
                    }
                    SynthesisRule::MidpointJitter => mu_k.clone(),
                };
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                center + &bank.chol * z
            })
            .collect();
        let ll: Vec<f64> = candidates.iter().map(|x| bank.log_likelihood(x, k)).collect();
        let mut order: Vec<usize> = (0..pool).collect();
        order.sort_by(|&i, &j| ll[i].total_cmp(&ll[j]).then(i.cmp(&j)));
        let mut kept: Vec<usize> = order[..keep].to_vec();
        kept.sort_unstable();
        let mut discarded: Vec<usize> = order[keep..].to_vec();
        discarded.sort_unstable();
        kept_ll.push(kept.iter().map(|&i| ll[i]).collect());
        discarded_ll.push(discarded.iter().map(|&i| ll[i]).collect());
        for i in kept {
            rows.push(candidates[i].clone());
            source_class.push(k);
        }
    }
    let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(VirtualBatch {
        features,
        source_class,
        kept_log_likelihood: kept_ll,
        discarded_log_likelihood: discarded_ll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trusted_keeps_lowest_losses() {
        let losses = [0.1, 0.2, 0.3, 0.4, 5.0, 4.0, 3.0, 2.0];
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(select_trusted(&losses, &labels, 2, 0.5).unwrap(), vec![0, 1, 6, 7]);
        assert_eq!(select_trusted(&losses, &labels, 2, 1.0).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(select_trusted(&losses, &labels, 3, 0.5).is_err());
        assert!(select_trusted(&losses, &labels, 2, 0.0).is_err());
    }

    #[test]
    fn trusted_ties_break_by_index() {
        let losses = [1.0, 1.0, 1.0, 1.0];
        let labels = [0, 0, 1, 1];
        assert_eq!(select_trusted(&losses, &labels, 2, 0.5).unwrap(), vec![0, 2]);
    }

    #[test]
    fn duplicated_points_leave_only_shrinkage() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, -3.0, 0.5, -3.0, 0.5]);
        let bank = fit_class_gaussians(&x, &[0, 0, 1, 1], 2, 0.01).unwrap();
        assert!((bank.covariance.clone() - DMatrix::identity(2, 2) * 0.01).abs().max() < 1e-15);
        let err = fit_class_gaussians(&x, &[0, 0, 1, 1], 2, 0.0).unwrap_err();
        assert!(err.to_string().contains("epsilon > 0"));
    }

    #[test]
    fn keep_all_is_order_stable() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 1.0, 5.0, 5.0, 6.0, 4.0]);
        let bank = fit_class_gaussians(&x, &[0, 0, 1, 1], 2, 0.1).unwrap();
        let a = sample_virtual_outliers(&bank, 10, 10, 7).unwrap();
        let b = sample_virtual_outliers(&bank, 10, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.nrows(), 20);
        assert!(a.discarded_log_likelihood.iter().all(|v| v.is_empty()));
        assert!(sample_virtual_outliers(&bank, 11, 10, 7).is_err());
    }
}
