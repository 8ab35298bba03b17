//! Dump export and paired baseline-vs-regularized runs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::MlpModel;
use super::task::{gen_synthetic_task, SyntheticTask, TaskConfig};
use super::train::{train, write_history_csv, EpochRecord, VmrConfig};
use crate::error::{AuditError, Result};
use crate::evaldump::{validate_dump, write_dump, EvalDump, Role};
use crate::metrics::{accuracy, auroc, fpr_at_95_tpr, MetricRow};
use crate::scores::{orient_ood_larger, ScoreKind, ScoreOptions, Scorer};
use crate::taxonomy::{paired_delta, taxonomy_report, TaxonomyOptions, TaxonomyReport, Verdict};

/// The four splits of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpSet {
    pub fit: EvalDump,
    pub id_test: EvalDump,
    pub near_ood: EvalDump,
    pub far_ood: EvalDump,
}

impl DumpSet {
    pub fn all(&self) -> [&EvalDump; 4] {
        [&self.fit, &self.id_test, &self.near_ood, &self.far_ood]
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for d in self.all() {
            write_dump(d, dir.join(&d.name))?;
        }
        Ok(())
    }
}

fn split_dump(model: &MlpModel, name: &str, role: Role, inputs: &nalgebra::DMatrix<f64>, labels: Option<&[usize]>) -> EvalDump {
    let head = model.head();
    let features = model.features(inputs).map(|v| v as f32 as f64);
    let logits = head.apply(&features);
    let labels = labels.map(|l| l.iter().map(|&y| y as i32).collect());
    EvalDump::new(name, role, labels, logits, features).with_head(head)
}

/// One forward pass per split. Logits are recomputed from the stored
/// single-precision head and features so the dump is self-consistent.
/// The fit split carries the noisy training labels.
pub fn export_evaldump(model: &MlpModel, task: &SyntheticTask) -> Result<DumpSet> {
    let set = DumpSet {
        fit: split_dump(model, "fit", Role::Fit, &task.train_inputs, Some(&task.train_noisy_labels)),
        id_test: split_dump(model, "id_test", Role::IdTest, &task.test_inputs, Some(&task.test_labels)),
        near_ood: split_dump(model, "near_ood", Role::Ood, &task.near_ood, None),
        far_ood: split_dump(model, "far_ood", Role::Ood, &task.far_ood, None),
    };
    for d in set.all() {
        validate_dump(d).into_result()?;
    }
    Ok(set)
}

/// Headline numbers for one arm; accuracy and AUROCs in percent, FPR95 in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub acc: f64,
    pub near_auroc: f64,
    pub near_fpr95: f64,
    pub far_auroc: f64,
    pub far_fpr95: f64,
    pub taxonomy: TaxonomyReport,
}

impl ArmMetrics {
    pub fn id_wrong_vs_ood_auroc(&self) -> Option<f64> {
        self.taxonomy.id_wrong_vs_ood_auroc
    }
}

/// Energy scoring, rank metrics, and the taxonomy against far-OOD on
/// exported dumps.
pub fn evaluate_dumps(dumps: &DumpSet) -> Result<ArmMetrics> {
    let scorer = Scorer::prepare(ScoreKind::Energy, None, &ScoreOptions::default())?;
    let score = |d: &EvalDump| scorer.score(d).map(|s| orient_ood_larger(&s));
    let id = score(&dumps.id_test)?;
    let near = score(&dumps.near_ood)?;
    let far = score(&dumps.far_ood)?;
    let labels = dumps.id_test.require_labels("accuracy")?;
    let taxonomy = taxonomy_report(&dumps.id_test, &[&dumps.far_ood], &scorer, &TaxonomyOptions::default())?;
    Ok(ArmMetrics {
        acc: accuracy(&dumps.id_test.logits, labels)?,
        near_auroc: 100.0 * auroc(&id, &near)?,
        near_fpr95: 100.0 * fpr_at_95_tpr(&id, &near)?,
        far_auroc: 100.0 * auroc(&id, &far)?,
        far_fpr95: 100.0 * fpr_at_95_tpr(&id, &far)?,
        taxonomy,
    })
}

/// Regularized minus baseline, in points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDeltas {
    pub far_auroc: f64,
    pub near_auroc: f64,
    pub acc: f64,
    pub far_fpr95: f64,
    pub id_wrong_vs_ood_auroc: f64,
    pub taxonomy_verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: Option<ArmMetrics>,
    pub repaired: Option<ArmMetrics>,
    pub deltas: Option<PairedDeltas>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmrPairedReport {
    pub task: TaskConfig,
    pub config: VmrConfig,
    pub seeds: Vec<SeedOutcome>,
    pub n_completed: usize,
    pub mean_delta_far_auroc: f64,
    pub mean_delta_near_auroc: f64,
    pub mean_delta_acc: f64,
    /// Seeds whose ID-wrong-vs-OOD AUROC went up.
    pub id_wrong_improved: usize,
    /// Near-OOD gained less than far-OOD on average.
    pub repair_partial: bool,
    pub note: String,
}

impl VmrPairedReport {
    pub fn completed(&self) -> impl Iterator<Item = (&SeedOutcome, &PairedDeltas)> {
        self.seeds.iter().filter_map(|s| s.deltas.as_ref().map(|d| (s, d)))
    }

    /// Baseline and regularized rows per completed seed, energy score.
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let setting = |seed: u64| format!("{} {} seed {seed}", self.task.noise_kind, self.task.noise_rate);
        let row = |method: &str, seed: u64, m: &ArmMetrics| {
            let mut r = MetricRow::new(method, "synthetic", &setting(seed), ScoreKind::Energy.name());
            r.acc = Some(m.acc);
            r.near_auroc = Some(m.near_auroc);
            r.near_fpr95 = Some(m.near_fpr95);
            r.far_auroc = Some(m.far_auroc);
            r.far_fpr95 = Some(m.far_fpr95);
            r
        };
        let mut out = Vec::new();
        for s in &self.seeds {
            if let (Some(b), Some(v)) = (&s.baseline, &s.repaired) {
                out.push(row("baseline", s.seed, b));
                out.push(row("vmr", s.seed, v));
            }
        }
        out
    }
}

/// Everything produced by one training arm.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub history: Vec<EpochRecord>,
    pub dumps: DumpSet,
    pub metrics: ArmMetrics,
    pub warmup_trajectory: Vec<Vec<f64>>,
}

pub fn run_arm(task: &SyntheticTask, cfg: &VmrConfig) -> Result<ArmRun> {
    let out = train(task, cfg)?;
    let dumps = export_evaldump(&out.model, task)?;
    let metrics = evaluate_dumps(&dumps)?;
    Ok(ArmRun {
        history: out.history,
        dumps,
        metrics,
        warmup_trajectory: out.warmup_trajectory,
    })
}

fn deltas(base: &ArmMetrics, rep: &ArmMetrics) -> Result<PairedDeltas> {
    let tax = paired_delta(&base.taxonomy, &rep.taxonomy)?;
    Ok(PairedDeltas {
        far_auroc: rep.far_auroc - base.far_auroc,
        near_auroc: rep.near_auroc - base.near_auroc,
        acc: rep.acc - base.acc,
        far_fpr95: rep.far_fpr95 - base.far_fpr95,
        id_wrong_vs_ood_auroc: 100.0 * tax.delta_id_wrong_vs_ood_auroc,
        taxonomy_verdict: tax.verdict,
    })
}

/// Task and training for seed `s` both use `s`.
pub fn seed_configs(task_cfg: &TaskConfig, cfg: &VmrConfig, seed: u64) -> (TaskConfig, VmrConfig, VmrConfig) {
    let task = TaskConfig { seed, ..task_cfg.clone() };
    let repaired = VmrConfig { seed, ..cfg.clone() };
    let baseline = VmrConfig {
        lambda_vos: 0.0,
        ..repaired.clone()
    };
    (task, baseline, repaired)
}

fn run_seed(task_cfg: &TaskConfig, cfg: &VmrConfig, seed: u64, out_dir: Option<&Path>) -> Result<SeedOutcome> {
    let (task_cfg, base_cfg, rep_cfg) = seed_configs(task_cfg, cfg, seed);
    let task = gen_synthetic_task(&task_cfg)?;
    let (base, rep) = rayon::join(|| run_arm(&task, &base_cfg), || run_arm(&task, &rep_cfg));
    let (base, rep) = (base?, rep?);
    if let Some(dir) = out_dir {
        for (name, arm) in [("baseline", &base), ("vmr", &rep)] {
            let arm_dir = dir.join(format!("seed_{seed}")).join(name);
            arm.dumps.write(&arm_dir)?;
            write_history_csv(&arm.history, arm_dir.join("history.csv"))?;
        }
    }
    Ok(SeedOutcome {
        seed,
        deltas: Some(deltas(&base.metrics, &rep.metrics)?),
        baseline: Some(base.metrics),
        repaired: Some(rep.metrics),
        error: None,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn vmr_experiment(task_cfg: &TaskConfig, cfg: &VmrConfig, seeds: &[u64]) -> Result<VmrPairedReport> {
    vmr_experiment_with_outputs(task_cfg, cfg, seeds, None)
}

/// Seeds run concurrently; a failing seed is recorded and the rest proceed.
/// With `out_dir`, dumps and training logs go to `seed_<s>/{baseline,vmr}/`.
pub fn vmr_experiment_with_outputs(
    task_cfg: &TaskConfig,
    cfg: &VmrConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<VmrPairedReport> {
    if seeds.is_empty() {
        return Err(AuditError::InvalidArgument("at least one seed is required".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            run_seed(task_cfg, cfg, seed, out_dir).unwrap_or_else(|e| {
                log::warn!("seed {seed} failed: {e}");
                SeedOutcome {
                    seed,
                    baseline: None,
                    repaired: None,
                    deltas: None,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    let done: Vec<&PairedDeltas> = outcomes.iter().filter_map(|s| s.deltas.as_ref()).collect();
    let mean_far = mean(done.iter().map(|d| d.far_auroc));
    let mean_near = mean(done.iter().map(|d| d.near_auroc));
    Ok(VmrPairedReport {
        task: task_cfg.clone(),
        config: cfg.clone(),
        n_completed: done.len(),
        mean_delta_far_auroc: mean_far,
        mean_delta_near_auroc: mean_near,
        mean_delta_acc: mean(done.iter().map(|d| d.acc)),
        id_wrong_improved: done.iter().filter(|d| d.id_wrong_vs_ood_auroc > 0.0).count(),
        repair_partial: mean_near < mean_far,
        note: "mechanism-level reproduction on a synthetic task".into(),
        seeds: outcomes,
    })
}
