//! Synthetic noisy-label tasks with near- and far-OOD splits.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Flip to one of the other classes uniformly.
    Symmetric,
    /// Flip to the cyclic next class.
    Asymmetric,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Symmetric => "sym",
            NoiseKind::Asymmetric => "asym",
        })
    }
}

/// Flips each label independently with probability `rate`.
pub fn inject_label_noise(labels: &[usize], n_classes: usize, kind: NoiseKind, rate: f64, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inject_label_noise_with(labels, n_classes, kind, rate, &mut rng)
}

pub fn inject_label_noise_with(
    labels: &[usize],
    n_classes: usize,
    kind: NoiseKind,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n_classes < 2 {
        return Err(AuditError::InvalidArgument(format!("label noise needs K >= 2, got {n_classes}")));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(AuditError::InvalidArgument(format!("noise rate must be in [0,1), got {rate}")));
    }
    labels
        .iter()
        .map(|&y| {
            if y >= n_classes {
                return Err(AuditError::InvalidArgument(format!("label {y} out of range")));
            }
            let u: f64 = rng.random();
            if u >= rate {
                return Ok(y);
            }
            Ok(match kind {
                NoiseKind::Asymmetric => (y + 1) % n_classes,
                NoiseKind::Symmetric => {
                    let r = rng.random_range(0..n_classes - 1);
                    if r >= y {
                        r + 1
                    } else {
                        r
                    }
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub k_classes: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    /// Radius of the circle carrying the class means.
    pub radius: f64,
    /// Per-coordinate standard deviation of every blob.
    pub sigma: f64,
    /// Far-OOD centers lie at distance `far_radius_factor · radius` from the origin.
    pub far_radius_factor: f64,
    /// Share of that distance spent in the class plane; the rest points into
    /// one of the remaining coordinates.
    pub far_in_plane_fraction: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            k_classes: 4,
            input_dim: 8,
            n_per_class: 1000,
            n_test_per_class: 500,
            noise_kind: NoiseKind::Symmetric,
            noise_rate: 0.5,
            radius: 4.0,
            sigma: 1.0,
            far_radius_factor: 4.0,
            far_in_plane_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub train_inputs: DMatrix<f64>,
    pub train_noisy_labels: Vec<usize>,
    pub train_clean_labels: Vec<usize>,
    pub test_inputs: DMatrix<f64>,
    pub test_labels: Vec<usize>,
    pub near_ood: DMatrix<f64>,
    pub far_ood: DMatrix<f64>,
    pub config: TaskConfig,
}

impl SyntheticTask {
    pub fn k_classes(&self) -> usize {
        self.config.k_classes
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Fraction of training labels that differ from the clean ones.
    pub fn flipped_fraction(&self) -> f64 {
        let flips = self
            .train_noisy_labels
            .iter()
            .zip(&self.train_clean_labels)
            .filter(|(a, b)| a != b)
            .count();
        flips as f64 / self.train_clean_labels.len().max(1) as f64
    }
}

fn class_mean(k: usize, cfg: &TaskConfig) -> DVector<f64> {
    let theta = 2.0 * PI * k as f64 / cfg.k_classes as f64;
    let mut m = DVector::zeros(cfg.input_dim);
    m[0] = cfg.radius * theta.cos();
    m[1] = cfg.radius * theta.sin();
    m
}

fn blob(center: &DVector<f64>, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, center.len(), |_, j| {
        let z: f64 = rng.sample(StandardNormal);
        center[j] + sigma * z
    })
}

fn stack_blobs(blobs: Vec<DMatrix<f64>>, d: usize) -> DMatrix<f64> {
    let refs: Vec<&DMatrix<f64>> = blobs.iter().collect();
    if refs.is_empty() {
        return DMatrix::zeros(0, d);
    }
    crate::linalg::vstack(&refs)
}

/// ID classes are Gaussian blobs with means on a circle in the first two
/// coordinates. Near-OOD blobs sit at midpoints of adjacent class means.
/// Far-OOD blobs sit at a larger radius, angled between classes and tilted
/// into the remaining coordinates.
pub fn gen_synthetic_task(cfg: &TaskConfig) -> Result<SyntheticTask> {
    if cfg.k_classes < 3 {
        return Err(AuditError::InvalidArgument(format!("need k_classes >= 3, got {}", cfg.k_classes)));
    }
    if cfg.input_dim < 2 {
        return Err(AuditError::InvalidArgument(format!("need input_dim >= 2, got {}", cfg.input_dim)));
    }
    if !(0.0..=0.95).contains(&cfg.noise_rate) {
        return Err(AuditError::InvalidArgument(format!("noise rate must be in [0,0.95], got {}", cfg.noise_rate)));
    }
    if !(0.0..=1.0).contains(&cfg.far_in_plane_fraction) {
        return Err(AuditError::InvalidArgument(format!(
            "far_in_plane_fraction must be in [0,1], got {}",
            cfg.far_in_plane_fraction
        )));
    }
    if !(cfg.sigma > 0.0) || cfg.radius <= 2.0 * cfg.sigma {
        return Err(AuditError::InvalidArgument(format!(
            "classes not separable by construction: radius {} <= 2·sigma {}",
            cfg.radius,
            2.0 * cfg.sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k_classes;
    let d = cfg.input_dim;
    let means: Vec<DVector<f64>> = (0..k).map(|c| class_mean(c, cfg)).collect();

    let mut train = Vec::new();
    let mut train_labels = Vec::new();
    let mut test = Vec::new();
    let mut test_labels = Vec::new();
    for (c, m) in means.iter().enumerate() {
        train.push(blob(m, cfg.n_per_class, cfg.sigma, &mut rng));
        train_labels.extend(std::iter::repeat_n(c, cfg.n_per_class));
    }
    for (c, m) in means.iter().enumerate() {
        test.push(blob(m, cfg.n_test_per_class, cfg.sigma, &mut rng));
        test_labels.extend(std::iter::repeat_n(c, cfg.n_test_per_class));
    }

    let near: Vec<DMatrix<f64>> = (0..k)
        .map(|c| {
            let mid = (&means[c] + &means[(c + 1) % k]) * 0.5;
            blob(&mid, cfg.n_test_per_class, cfg.sigma, &mut rng)
        })
        .collect();

    let far: Vec<DMatrix<f64>> = (0..k)
        .map(|c| {
            let phi = 2.0 * PI * (c as f64 + 0.5) / k as f64;
            let r = cfg.far_radius_factor * cfg.radius;
            let f = if d > 2 { cfg.far_in_plane_fraction } else { 1.0 };
            let mut center = DVector::zeros(d);
            center[0] = r * f * phi.cos();
            center[1] = r * f * phi.sin();
            if d > 2 {
                center[2 + c % (d - 2)] = r * (1.0 - f * f).sqrt();
            }
            blob(&center, cfg.n_test_per_class, cfg.sigma, &mut rng)
        })
        .collect();

    let noisy = inject_label_noise_with(&train_labels, k, cfg.noise_kind, cfg.noise_rate, &mut rng)?;
    Ok(SyntheticTask {
        train_inputs: stack_blobs(train, d),
        train_noisy_labels: noisy,
        train_clean_labels: train_labels,
        test_inputs: stack_blobs(test, d),
        test_labels,
        near_ood: stack_blobs(near, d),
        far_ood: stack_blobs(far, d),
        config: cfg.clone(),
    })
}
