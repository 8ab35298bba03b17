//! Training loop: warmup on all labels, then small-loss trusted batches with
//! an optional energy-separation term against virtual outliers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::MlpModel;
use super::objective::{energies, objective, per_sample_cross_entropy, EnergyLogistic};
use super::synth::{fit_class_gaussians, sample_virtual_outliers_with, select_trusted, SynthesisRule};
use super::task::SyntheticTask;
use crate::error::{AuditError, Result};
use crate::linalg::select_rows;
use crate::metrics::auroc_values;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VmrConfig {
    pub lambda_vos: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Candidates drawn per class (M).
    pub pool_size: usize,
    /// Lowest-likelihood candidates kept per class (t).
    pub keep_count: usize,
    /// Per-class small-loss keep fraction; `None` uses `1 − noise_rate`.
    pub trusted_keep_fraction: Option<f64>,
    pub shrinkage: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub synthesis: SynthesisRule,
    pub seed: u64,
}

impl Default for VmrConfig {
    fn default() -> Self {
        Self {
            lambda_vos: 0.1,
            hidden: 64,
            epochs: 60,
            warmup_epochs: 10,
            pool_size: 200,
            keep_count: 20,
            trusted_keep_fraction: None,
            shrinkage: 1e-3,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 128,
            synthesis: SynthesisRule::LowLikelihood,
            seed: 0,
        }
    }
}

impl VmrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AuditError::InvalidArgument(msg));
        if !(self.lambda_vos >= 0.0) || !self.lambda_vos.is_finite() {
            return bad(format!("lambda_vos must be a nonnegative number, got {}", self.lambda_vos));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.keep_count > self.pool_size || self.keep_count == 0 {
            return bad(format!("keep_count {} must be in [1, pool_size {}]", self.keep_count, self.pool_size));
        }
        if let Some(f) = self.trusted_keep_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("trusted_keep_fraction must be in (0,1], got {f}"));
            }
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return bad("hidden width and batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("bad optimizer settings: lr {} momentum {}", self.learning_rate, self.momentum));
        }
        Ok(())
    }

    pub fn keep_fraction_for(&self, task: &SyntheticTask) -> f64 {
        self.trusted_keep_fraction
            .unwrap_or_else(|| (1.0 - task.config.noise_rate).clamp(0.05, 1.0))
    }
}

/// One row of the training log. `acc` is in percent, `far_auroc` a fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_host: f64,
    pub loss_vos: f64,
    pub acc: f64,
    pub far_auroc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub logistic: EnergyLogistic,
    pub history: Vec<EpochRecord>,
    /// Flattened parameters at the end of every warmup epoch.
    pub warmup_trajectory: Vec<Vec<f64>>,
    /// Trusted indices of the last epoch.
    pub trusted: Vec<usize>,
}

fn test_accuracy(model: &MlpModel, task: &SyntheticTask) -> f64 {
    let logits = model.logits(&task.test_inputs);
    let correct = (0..logits.nrows())
        .filter(|&i| crate::linalg::argmax(&crate::linalg::row_vec(&logits, i)) == task.test_labels[i])
        .count();
    100.0 * correct as f64 / logits.nrows().max(1) as f64
}

fn far_energy_auroc(model: &MlpModel, task: &SyntheticTask) -> f64 {
    let id = energies(&model.logits(&task.test_inputs));
    let ood = energies(&model.logits(&task.far_ood));
    auroc_values(&id, &ood)
}

fn momentum_step(
    model: &mut MlpModel,
    velocity: &mut MlpModel,
    logistic: &mut EnergyLogistic,
    logistic_velocity: &mut EnergyLogistic,
    grad: &MlpModel,
    grad_logistic: EnergyLogistic,
    cfg: &VmrConfig,
) {
    velocity.scale(cfg.momentum);
    velocity.axpy(1.0, grad);
    model.axpy(-cfg.learning_rate, velocity);
    logistic_velocity.a = cfg.momentum * logistic_velocity.a + grad_logistic.a;
    logistic_velocity.c = cfg.momentum * logistic_velocity.c + grad_logistic.c;
    logistic.a -= cfg.learning_rate * logistic_velocity.a;
    logistic.c -= cfg.learning_rate * logistic_velocity.c;
}

/// Deterministic given `cfg.seed`. Initialization and batch order use one
/// stream, virtual-outlier sampling another, so the separation term never
/// perturbs the host's randomness.
pub fn train(task: &SyntheticTask, cfg: &VmrConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = task.k_classes();
    let n = task.train_inputs.nrows();
    let mut host_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vos_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    vos_rng.set_stream(1);

    let mut model = MlpModel::init(task.input_dim(), cfg.hidden, k, &mut host_rng);
    let mut velocity = model.zeros_like();
    let mut logistic = EnergyLogistic::default();
    let mut logistic_velocity = EnergyLogistic { a: 0.0, c: 0.0 };
    let keep_fraction = cfg.keep_fraction_for(task);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut warmup_trajectory = Vec::with_capacity(cfg.warmup_epochs);
    let mut trusted: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let warm = epoch < cfg.warmup_epochs;
        if !warm {
            let logits = model.logits(&task.train_inputs);
            let losses = per_sample_cross_entropy(&logits, &task.train_noisy_labels);
            trusted = select_trusted(&losses, &task.train_noisy_labels, k, keep_fraction)?;
        }
        let bank = if !warm && cfg.lambda_vos > 0.0 {
            let feats = model.features(&select_rows(&task.train_inputs, &trusted));
            let labels: Vec<usize> = trusted.iter().map(|&i| task.train_noisy_labels[i]).collect();
            Some(fit_class_gaussians(&feats, &labels, k, cfg.shrinkage)?)
        } else {
            None
        };

        let mut order = trusted.clone();
        order.shuffle(&mut host_rng);
        let (mut host_sum, mut vos_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = select_rows(&task.train_inputs, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| task.train_noisy_labels[i]).collect();
            let virt = match &bank {
                Some(b) => Some(
                    sample_virtual_outliers_with(b, cfg.keep_count, cfg.pool_size, cfg.synthesis, &mut vos_rng)?
                        .features,
                ),
                None => None,
            };
            let out = objective(&model, logistic, &x, &y, virt.as_ref(), cfg.lambda_vos)?;
            if !out.total.is_finite() {
                return Err(AuditError::Diverged {
                    epoch,
                    reason: format!("loss became {}", out.total),
                });
            }
            momentum_step(
                &mut model,
                &mut velocity,
                &mut logistic,
                &mut logistic_velocity,
                &out.grad,
                out.grad_logistic,
                cfg,
            );
            host_sum += out.loss_host;
            vos_sum += out.loss_vos;
            batches += 1;
        }
        if !model.is_finite() {
            return Err(AuditError::Diverged {
                epoch,
                reason: "non-finite parameters".into(),
            });
        }
        if warm {
            warmup_trajectory.push(model.to_flat());
        }
        let b = batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            loss_host: host_sum / b,
            loss_vos: vos_sum / b,
            acc: test_accuracy(&model, task),
            far_auroc: far_energy_auroc(&model, task),
        });
        log::debug!(
            "epoch {epoch}: host {:.4} vos {:.4} acc {:.2}",
            history[epoch].loss_host,
            history[epoch].loss_vos,
            history[epoch].acc
        );
    }
    Ok(TrainOutcome {
        model,
        logistic,
        history,
        warmup_trajectory,
        trusted,
    })
}

/// Trusted indices selected right after `epochs` warmup epochs.
pub fn trusted_after_warmup(task: &SyntheticTask, cfg: &VmrConfig, epochs: usize) -> Result<Vec<usize>> {
    let warm_cfg = VmrConfig {
        lambda_vos: 0.0,
        epochs: epochs + 1,
        warmup_epochs: epochs,
        ..cfg.clone()
    };
    Ok(train(task, &warm_cfg)?.trusted)
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| AuditError::io(path, std::io::Error::other(e)))?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| AuditError::io(path, e))?;
    Ok(())
}
