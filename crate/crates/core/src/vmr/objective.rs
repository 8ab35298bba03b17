//! Host cross-entropy, the energy-separation loss, and their combination.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mlp::MlpModel;
use crate::error::{AuditError, Result};
use crate::linalg::logsumexp;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_softmax_lse(logits: &DMatrix<f64>, i: usize) -> (Vec<f64>, f64) {
    let row: Vec<f64> = logits.row(i).iter().copied().collect();
    let lse = logsumexp(row.iter().copied());
    (row.iter().map(|&z| (z - lse).exp()).collect(), lse)
}

/// Energy `E = −logsumexp(z)` per row.
pub fn energies(logits: &DMatrix<f64>) -> Vec<f64> {
    (0..logits.nrows())
        .map(|i| -logsumexp(logits.row(i).iter().copied()))
        .collect()
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows();
    let mut grad = DMatrix::zeros(n, logits.ncols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (p, lse) = row_softmax_lse(logits, i);
        loss += lse - logits[(i, y)];
        for (j, pj) in p.into_iter().enumerate() {
            grad[(i, j)] = (pj - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Per-sample cross-entropy, used for small-loss selection.
pub fn per_sample_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logsumexp(logits.row(i).iter().copied()) - logits[(i, y)])
        .collect()
}

/// Logistic map from negative energy to an in-distribution probability,
/// `σ(a·(−E) + c)`. Trained jointly and dropped at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyLogistic {
    pub a: f64,
    pub c: f64,
}

impl Default for EnergyLogistic {
    fn default() -> Self {
        Self { a: 1.0, c: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VosLoss {
    pub loss: f64,
    pub grad_id: Vec<f64>,
    pub grad_virtual: Vec<f64>,
    pub grad_a: f64,
    pub grad_c: f64,
}

/// Binary cross-entropy separating ID energies (target 1) from virtual
/// outlier energies (target 0), each side averaged over its own count.
/// Gradients are with respect to the energies and the logistic parameters.
pub fn vos_loss(id_energies: &[f64], virtual_energies: &[f64], logistic: EnergyLogistic) -> Result<VosLoss> {
    if id_energies.is_empty() || virtual_energies.is_empty() {
        return Err(AuditError::Empty("energy separation needs ID and virtual energies".into()));
    }
    if id_energies.iter().chain(virtual_energies).any(|e| !e.is_finite()) {
        return Err(AuditError::NonFinite("non-finite energy in separation loss".into()));
    }
    let EnergyLogistic { a, c } = logistic;
    let n_id = id_energies.len() as f64;
    let n_v = virtual_energies.len() as f64;
    let mut loss = 0.0;
    let mut grad_a = 0.0;
    let mut grad_c = 0.0;
    let grad_id = id_energies
        .iter()
        .map(|&e| {
            let s = -a * e + c;
            loss += softplus(-s) / n_id;
            let ds = -sigmoid(-s) / n_id;
            grad_a += ds * -e;
            grad_c += ds;
            -a * ds
        })
        .collect();
    let grad_virtual = virtual_energies
        .iter()
        .map(|&e| {
            let s = -a * e + c;
            loss += softplus(s) / n_v;
            let ds = sigmoid(s) / n_v;
            grad_a += ds * -e;
            grad_c += ds;
            -a * ds
        })
        .collect();
    Ok(VosLoss { loss, grad_id, grad_virtual, grad_a, grad_c })
}

/// `dL/dlogits` for rows whose energy gradient is `grad_e`, using
/// `dE/dz = −softmax(z)`.
fn energy_to_logit_grad(logits: &DMatrix<f64>, grad_e: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(logits.nrows(), logits.ncols());
    for (i, &g) in grad_e.iter().enumerate() {
        let (p, _) = row_softmax_lse(logits, i);
        for (j, pj) in p.into_iter().enumerate() {
            out[(i, j)] = -g * pj;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss_host: f64,
    /// Unweighted separation loss; zero when the term is inactive.
    pub loss_vos: f64,
    pub total: f64,
    pub grad: MlpModel,
    pub grad_logistic: EnergyLogistic,
}

/// `CE(batch) + λ·L_VOS(batch, virtual)`. ID energies take gradients
/// through the whole network, virtual features only through the head.
/// With `virtual_features = None` or `λ = 0` the separation term is skipped.
pub fn objective(
    model: &MlpModel,
    logistic: EnergyLogistic,
    x: &DMatrix<f64>,
    labels: &[usize],
    virtual_features: Option<&DMatrix<f64>>,
    lambda: f64,
) -> Result<ObjectiveValue> {
    let act = model.forward(x);
    let (loss_host, mut dlogits) = cross_entropy(&act.logits, labels);
    let mut loss_vos = 0.0;
    let mut grad_logistic = EnergyLogistic { a: 0.0, c: 0.0 };
    let mut head_extra = None;
    if let Some(v) = virtual_features.filter(|_| lambda > 0.0) {
        let v_logits = model.head_logits(v);
        let vos = vos_loss(&energies(&act.logits), &energies(&v_logits), logistic)?;
        loss_vos = vos.loss;
        let scaled: Vec<f64> = vos.grad_id.iter().map(|g| lambda * g).collect();
        dlogits += energy_to_logit_grad(&act.logits, &scaled);
        let scaled_v: Vec<f64> = vos.grad_virtual.iter().map(|g| lambda * g).collect();
        let dv = energy_to_logit_grad(&v_logits, &scaled_v);
        head_extra = Some(model.head_backward(v, &dv));
        grad_logistic = EnergyLogistic {
            a: lambda * vos.grad_a,
            c: lambda * vos.grad_c,
        };
    }
    let mut grad = model.backward(x, &act, &dlogits);
    if let Some((w3, b3)) = head_extra {
        grad.w3 += w3;
        grad.b3 += b3;
    }
    Ok(ObjectiveValue {
        loss_host,
        loss_vos,
        total: loss_host + lambda * loss_vos,
        grad,
        grad_logistic,
    })
}
