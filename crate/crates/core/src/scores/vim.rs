//! Virtual-logit style detector: scaled residual norm off the principal
//! feature subspace minus the log-sum-exp of the logits.

use nalgebra::{DMatrix, DVector};

use super::{Direction, ScoreVector};
use crate::error::{AuditError, Result};
use crate::evaldump::EvalDump;
use crate::linalg::{logsumexp, row_vec, sym_eigen_desc};

#[derive(Debug, Clone, PartialEq)]
pub struct VimModel {
    pub origin: DVector<f64>,
    /// D×D′ with orthonormal columns
    pub principal_basis: DMatrix<f64>,
    pub alpha: f64,
}

/// `min(D/2, 64)`, at least 1.
pub fn default_subspace_dim(feat_dim: usize) -> usize {
    (feat_dim / 2).min(64).max(1)
}

impl VimModel {
    /// Norm of each row of `features - origin` after projecting out the basis.
    pub fn residual_norms(&self, features: &DMatrix<f64>) -> Vec<f64> {
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.origin.transpose();
        }
        let coords = &centered * &self.principal_basis;
        let residual = centered - coords * self.principal_basis.transpose();
        residual.row_iter().map(|r| r.norm()).collect()
    }
}

pub fn fit_vim(fit: &EvalDump, subspace_dim: usize) -> Result<VimModel> {
    let head = fit.require_head("vim")?;
    let d = fit.feat_dim();
    if subspace_dim == 0 || subspace_dim >= d {
        return Err(AuditError::InvalidArgument(format!("subspace dim must be in [1, {d}), got {subspace_dim}")));
    }
    if fit.n_samples() == 0 {
        return Err(AuditError::Empty("vim needs fit samples".into()));
    }
    let pinv = head
        .weights
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| AuditError::Singular(format!("head pseudo-inverse failed: {e}")))?;
    let origin = -(pinv * &head.bias);

    let mut centered = fit.features.clone();
    for mut row in centered.row_iter_mut() {
        row -= origin.transpose();
    }
    let second_moment = centered.transpose() * &centered / fit.n_samples() as f64;
    let (_, vectors) = sym_eigen_desc(&second_moment);
    let principal_basis = vectors.columns(0, subspace_dim).clone_owned();

    let mut model = VimModel {
        origin,
        principal_basis,
        alpha: 1.0,
    };
    let residuals = model.residual_norms(&fit.features);
    let mean_residual = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let scale = centered.norm() / (fit.n_samples() as f64).sqrt();
    if !(mean_residual > 1e-12 * scale.max(1e-300)) {
        return Err(AuditError::Degenerate(
            "all fit features lie inside the principal subspace; residual norms vanish".into(),
        ));
    }
    let mean_maxlogit = (0..fit.n_samples())
        .map(|i| row_vec(&fit.logits, i).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / fit.n_samples() as f64;
    model.alpha = mean_maxlogit / mean_residual;
    if !(model.alpha > 0.0) {
        return Err(AuditError::Degenerate(format!(
            "vim scale must be positive; mean fit maxlogit is {mean_maxlogit}"
        )));
    }
    Ok(model)
}

/// `alpha · residual − logsumexp(logits)` (OOD-larger).
pub fn score_vim(model: &VimModel, dump: &EvalDump) -> Result<ScoreVector> {
    if dump.feat_dim() != model.origin.len() {
        return Err(AuditError::Shape(format!(
            "features have D={}, model has D={}",
            dump.feat_dim(),
            model.origin.len()
        )));
    }
    let residuals = model.residual_norms(&dump.features);
    let values = residuals
        .iter()
        .enumerate()
        .map(|(i, r)| model.alpha * r - logsumexp(dump.logits.row(i).iter().copied()))
        .collect();
    Ok(ScoreVector::new("vim", Direction::OodLarger, values))
}
