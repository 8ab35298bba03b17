//! Small training lab for virtual-outlier energy regularization on
//! synthetic noisy-label tasks.
//!
//! A rectifier MLP is trained with cross-entropy on per-class small-loss
//! batches. The regularized arm adds `λ·L_VOS`, a binary cross-entropy that
//! pushes the energy of trusted samples down and the energy of virtual
//! outliers up. Virtual outliers are low-likelihood draws from class
//! Gaussians fitted to penultimate features. Test-time scoring is the plain
//! energy score on exported dumps.

mod experiment;
mod mlp;
mod objective;
mod synth;
mod task;
mod train;

pub use experiment::{
    evaluate_dumps, export_evaldump, run_arm, seed_configs, vmr_experiment, vmr_experiment_with_outputs, ArmMetrics,
    ArmRun, DumpSet, PairedDeltas, SeedOutcome, VmrPairedReport,
};
pub use mlp::{Activations, MlpModel};
pub use objective::{cross_entropy, energies, objective, per_sample_cross_entropy, vos_loss, EnergyLogistic, ObjectiveValue, VosLoss};
pub use synth::{
    fit_class_gaussians, sample_virtual_outliers, sample_virtual_outliers_with, select_trusted, GaussianBank,
    SynthesisRule, VirtualBatch,
};
pub use task::{gen_synthetic_task, inject_label_noise, inject_label_noise_with, NoiseKind, SyntheticTask, TaskConfig};
pub use train::{train, trusted_after_warmup, write_history_csv, EpochRecord, TrainOutcome, VmrConfig};
