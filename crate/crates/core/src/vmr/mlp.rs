//! Two-hidden-layer rectifier network with hand-written backpropagation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::evaldump::LinearHead;

/// `input → hidden → hidden → K`. The penultimate representation is the
/// second hidden activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// h×d
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// h×h
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// K×h
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

/// Intermediate activations of a batch forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub pre1: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub pre2: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x * w.transpose();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
    out
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn relu_mask(grad: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    grad.zip_apply(pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

impl MlpModel {
    /// He-normal weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let s1 = (2.0 / input_dim as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        let s3 = (1.0 / hidden as f64).sqrt();
        Self {
            w1: gaussian_matrix(hidden, input_dim, s1, rng),
            b1: DVector::zeros(hidden),
            w2: gaussian_matrix(hidden, hidden, s2, rng),
            b2: DVector::zeros(hidden),
            w3: gaussian_matrix(n_classes, hidden, s3, rng),
            b3: DVector::zeros(n_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
            w3: DMatrix::zeros(self.w3.nrows(), self.w3.ncols()),
            b3: DVector::zeros(self.b3.len()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.w3.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Activations {
        let pre1 = affine(x, &self.w1, &self.b1);
        let a1 = relu(&pre1);
        let pre2 = affine(&a1, &self.w2, &self.b2);
        let a2 = relu(&pre2);
        let logits = affine(&a2, &self.w3, &self.b3);
        Activations { pre1, a1, pre2, a2, logits }
    }

    /// Penultimate features, `n×h`.
    pub fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).a2
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).logits
    }

    /// Logits of penultimate features through the last layer only.
    pub fn head_logits(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        affine(features, &self.w3, &self.b3)
    }

    pub fn head(&self) -> LinearHead {
        LinearHead::new(self.w3.clone(), self.b3.clone())
    }

    /// Gradient of a loss with respect to all parameters, given `dL/dlogits`.
    pub fn backward(&self, x: &DMatrix<f64>, act: &Activations, dlogits: &DMatrix<f64>) -> MlpModel {
        let w3 = dlogits.transpose() * &act.a2;
        let b3 = column_sums(dlogits);
        let mut d2 = dlogits * &self.w3;
        relu_mask(&mut d2, &act.pre2);
        let w2 = d2.transpose() * &act.a1;
        let b2 = column_sums(&d2);
        let mut d1 = &d2 * &self.w2;
        relu_mask(&mut d1, &act.pre1);
        let w1 = d1.transpose() * x;
        let b1 = column_sums(&d1);
        MlpModel { w1, b1, w2, b2, w3, b3 }
    }

    /// Gradient of the last layer only for a head-only forward pass.
    pub fn head_backward(&self, features: &DMatrix<f64>, dlogits: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        (dlogits.transpose() * features, column_sums(dlogits))
    }

    fn parts(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    /// All parameters in a fixed order (column-major within each array).
    pub fn to_flat(&self) -> Vec<f64> {
        self.parts().concat()
    }

    /// Overwrites the parameters from `flat`, which must hold `n_params` values.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut offset = 0;
        for part in self.parts_mut() {
            let n = part.len();
            part.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &MlpModel) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for part in self.parts_mut() {
            part.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_flat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpModel::init(8, 16, 4, &mut rng);
        let x = gaussian_matrix(5, 8, 1.0, &mut rng);
        let act = m.forward(&x);
        assert_eq!(act.logits.shape(), (5, 4));
        assert_eq!(act.a2.shape(), (5, 16));
        assert!(act.a2.iter().all(|&v| v >= 0.0));
        let flat = m.to_flat();
        assert_eq!(flat.len(), 8 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4);
        let mut z = m.zeros_like();
        z.set_flat(&flat);
        assert_eq!(z, m);
    }

    #[test]
    fn head_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MlpModel::init(3, 7, 5, &mut rng);
        let x = gaussian_matrix(6, 3, 1.0, &mut rng);
        let act = m.forward(&x);
        let diff = (m.head_logits(&act.a2) - &act.logits).abs().max();
        assert!(diff < 1e-12);
    }
}
