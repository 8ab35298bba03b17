//! Deep nearest-neighbor detector on L2-normalized features.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{Direction, ScoreVector};
use crate::error::{AuditError, Result};
use crate::evaldump::EvalDump;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    /// Rows have unit L2 norm.
    pub fit_bank: DMatrix<f64>,
    pub k: usize,
}

/// `max(1, round(0.01 · bank_size))`.
pub fn default_k(bank_size: usize) -> usize {
    ((0.01 * bank_size as f64).round() as usize).max(1)
}

fn normalized(features: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut out = features.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(AuditError::Degenerate(format!("{what} row {i} has zero norm; cannot normalize")));
        }
        row /= norm;
    }
    Ok(out)
}

impl KnnModel {
    pub fn from_bank(bank: &DMatrix<f64>, k: usize) -> Result<Self> {
        if bank.nrows() == 0 {
            return Err(AuditError::Empty("k-NN bank is empty".into()));
        }
        if k == 0 || k > bank.nrows() {
            return Err(AuditError::InvalidArgument(format!("k must be in [1, {}], got {k}", bank.nrows())));
        }
        Ok(Self {
            fit_bank: normalized(bank, "bank")?,
            k,
        })
    }
}

pub fn fit_knn(fit: &EvalDump, k: usize) -> Result<KnnModel> {
    KnnModel::from_bank(&fit.features, k)
}

/// Distance from each normalized query to its k-th nearest bank row.
pub fn score_knn(model: &KnnModel, features: &DMatrix<f64>) -> Result<ScoreVector> {
    if features.ncols() != model.fit_bank.ncols() {
        return Err(AuditError::Shape(format!(
            "features have D={}, bank has D={}",
            features.ncols(),
            model.fit_bank.ncols()
        )));
    }
    let q = normalized(features, "query")?;
    let bank = &model.fit_bank;
    let k = model.k;
    let values = (0..q.nrows())
        .into_par_iter()
        .map(|i| {
            let mut d2: Vec<f64> = (0..bank.nrows())
                .map(|j| {
                    q.row(i)
                        .iter()
                        .zip(bank.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect();
    Ok(ScoreVector::new("knn", Direction::OodLarger, values))
}
