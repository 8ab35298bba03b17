//! Post-hoc OOD scores.
//!
//! Logit scores (MSP, energy, MaxLogit, margin, entropy, temperature-only
//! ODIN) work on stored logits. Feature detectors (Mahalanobis, k-NN, ReAct,
//! ViM) are fitted once on a labeled fit split and are immutable afterwards.
//! Every score carries its natural [`Direction`]; metrics only accept
//! [`Direction::OodLarger`], so callers go through [`orient_ood_larger`].

mod knn;
mod mahalanobis;
mod react;
mod vim;

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::evaldump::EvalDump;
use crate::linalg::{logsumexp, row_vec, softmax};

pub use knn::{default_k, fit_knn, score_knn, KnnModel};
pub use mahalanobis::{class_means_and_pooled_cov, default_shrinkage, fit_mahalanobis, score_mahalanobis, MahalanobisModel};
pub use react::{react_energy, react_threshold, DEFAULT_CLIP_PERCENTILE};
pub use vim::{default_subspace_dim, fit_vim, score_vim, VimModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    OodLarger,
    IdLarger,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::OodLarger => "ood_larger",
            Direction::IdLarger => "id_larger",
        })
    }
}

/// Per-sample scalar scores with a declared direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub score_name: String,
    pub direction: Direction,
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(score_name: impl Into<String>, direction: Direction, values: Vec<f64>) -> Self {
        Self {
            score_name: score_name.into(),
            direction,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Subset by sample index, keeping name and direction.
    pub fn select(&self, idx: &[usize]) -> ScoreVector {
        ScoreVector::new(self.score_name.clone(), self.direction, idx.iter().map(|&i| self.values[i]).collect())
    }

    /// Concatenation of same-named, same-direction vectors.
    pub fn concat(parts: &[ScoreVector]) -> Result<ScoreVector> {
        let first = parts
            .first()
            .ok_or_else(|| AuditError::Empty("no score vectors to concatenate".into()))?;
        if parts
            .iter()
            .any(|p| p.direction != first.direction || p.score_name != first.score_name)
        {
            return Err(AuditError::InvalidArgument("cannot concatenate different score families".into()));
        }
        let values = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        Ok(ScoreVector::new(first.score_name.clone(), first.direction, values))
    }
}

/// Negates iff the score is ID-larger; the result is always OOD-larger.
pub fn orient_ood_larger(sv: &ScoreVector) -> ScoreVector {
    match sv.direction {
        Direction::OodLarger => sv.clone(),
        Direction::IdLarger => ScoreVector::new(
            sv.score_name.clone(),
            Direction::OodLarger,
            sv.values.iter().map(|v| -v).collect(),
        ),
    }
}

fn check_logits(logits: &DMatrix<f64>, op: &str) -> Result<()> {
    if logits.ncols() < 2 {
        return Err(AuditError::InvalidArgument(format!("{op} needs K >= 2, got {}", logits.ncols())));
    }
    for i in 0..logits.nrows() {
        for j in 0..logits.ncols() {
            if !logits[(i, j)].is_finite() {
                return Err(AuditError::NonFinite(format!("logits[{i},{j}]")));
            }
        }
    }
    Ok(())
}

fn per_row(logits: &DMatrix<f64>, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..logits.nrows()).map(|i| f(&row_vec(logits, i))).collect()
}

/// Maximum softmax probability (ID-larger).
pub fn msp(logits: &DMatrix<f64>) -> Result<ScoreVector> {
    check_logits(logits, "msp")?;
    let values = per_row(logits, |z| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        // the max entry contributes exp(0) = 1
        1.0 / s
    });
    Ok(ScoreVector::new("msp", Direction::IdLarger, values))
}

/// Energy `-T·log Σ exp(z_k/T)` (OOD-larger).
pub fn energy(logits: &DMatrix<f64>, temperature: f64) -> Result<ScoreVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AuditError::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    check_logits(logits, "energy")?;
    let values = per_row(logits, |z| {
        if temperature == 1.0 {
            -logsumexp(z.iter().copied())
        } else {
            -temperature * logsumexp(z.iter().map(|v| v / temperature))
        }
    });
    Ok(ScoreVector::new("energy", Direction::OodLarger, values))
}

/// Largest logit (ID-larger).
pub fn maxlogit(logits: &DMatrix<f64>) -> Result<ScoreVector> {
    check_logits(logits, "maxlogit")?;
    let values = per_row(logits, |z| z.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    Ok(ScoreVector::new("maxlogit", Direction::IdLarger, values))
}

/// Gap between the two largest logits (ID-larger).
pub fn margin(logits: &DMatrix<f64>) -> Result<ScoreVector> {
    check_logits(logits, "margin")?;
    let values = per_row(logits, |z| {
        let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &v in z {
            if v > a {
                b = a;
                a = v;
            } else if v > b {
                b = v;
            }
        }
        a - b
    });
    Ok(ScoreVector::new("margin", Direction::IdLarger, values))
}

/// Shannon entropy of the softmax, in nats (OOD-larger).
pub fn shannon_entropy(logits: &DMatrix<f64>) -> Result<ScoreVector> {
    check_logits(logits, "entropy")?;
    let values = per_row(logits, |z| {
        // H = lse(z) - Σ p_k z_k, written stably via shifted logits
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = softmax(z);
        let lse_shift = logsumexp(z.iter().map(|v| v - m));
        let h: f64 = p.iter().zip(z).map(|(&pk, &zk)| pk * (lse_shift - (zk - m))).sum();
        h.max(0.0)
    });
    Ok(ScoreVector::new("entropy", Direction::OodLarger, values))
}

/// Temperature-scaled MSP without input perturbation: `msp(z / T)`.
pub fn odin_t(logits: &DMatrix<f64>, temperature: f64) -> Result<ScoreVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AuditError::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let mut sv = msp(&(logits / temperature))?;
    sv.score_name = "odin_t".into();
    Ok(sv)
}

pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;

/// Every score the auditor knows by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Msp,
    Energy,
    Maxlogit,
    Margin,
    Entropy,
    OdinT,
    Mahalanobis,
    Knn,
    React,
    Vim,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 10] = [
        ScoreKind::Msp,
        ScoreKind::Energy,
        ScoreKind::Maxlogit,
        ScoreKind::Margin,
        ScoreKind::Entropy,
        ScoreKind::OdinT,
        ScoreKind::Mahalanobis,
        ScoreKind::Knn,
        ScoreKind::React,
        ScoreKind::Vim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Energy => "energy",
            ScoreKind::Maxlogit => "maxlogit",
            ScoreKind::Margin => "margin",
            ScoreKind::Entropy => "entropy",
            ScoreKind::OdinT => "odin_t",
            ScoreKind::Mahalanobis => "mahalanobis",
            ScoreKind::Knn => "knn",
            ScoreKind::React => "react",
            ScoreKind::Vim => "vim",
        }
    }

    pub fn needs_fit(self) -> bool {
        matches!(self, ScoreKind::Mahalanobis | ScoreKind::Knn | ScoreKind::React | ScoreKind::Vim)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AuditError::InvalidArgument(format!("unknown score {s:?}")))
    }
}

/// Hyperparameters for the score family. `None` selects the documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    pub energy_temperature: f64,
    pub odin_temperature: f64,
    pub mahalanobis_shrinkage: Option<f64>,
    pub knn_k: Option<usize>,
    pub react_percentile: f64,
    pub vim_dim: Option<usize>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            energy_temperature: 1.0,
            odin_temperature: DEFAULT_ODIN_TEMPERATURE,
            mahalanobis_shrinkage: None,
            knn_k: None,
            react_percentile: DEFAULT_CLIP_PERCENTILE,
            vim_dim: None,
        }
    }
}

/// A score ready to apply to dumps; detectors are already fitted.
#[derive(Debug, Clone)]
pub enum Scorer {
    Logit { kind: ScoreKind, temperature: f64 },
    Mahalanobis(MahalanobisModel),
    Knn(KnnModel),
    React { threshold: Option<f64> },
    Vim(VimModel),
}

impl Scorer {
    /// Fits whatever `kind` needs from `fit`.
    pub fn prepare<'a>(kind: ScoreKind, fit: Option<&'a EvalDump>, opts: &ScoreOptions) -> Result<Scorer> {
        let need = |fit: Option<&'a EvalDump>| -> Result<&'a EvalDump> {
            fit.ok_or_else(|| AuditError::InvalidArgument(format!("{kind} requires fit dump")))
        };
        Ok(match kind {
            ScoreKind::Energy => Scorer::Logit { kind, temperature: opts.energy_temperature },
            ScoreKind::OdinT => Scorer::Logit { kind, temperature: opts.odin_temperature },
            ScoreKind::Msp | ScoreKind::Maxlogit | ScoreKind::Margin | ScoreKind::Entropy => {
                Scorer::Logit { kind, temperature: 1.0 }
            }
            ScoreKind::Mahalanobis => {
                let fit = need(fit)?;
                let shrink = match opts.mahalanobis_shrinkage {
                    Some(s) => s,
                    None => default_shrinkage(fit)?,
                };
                Scorer::Mahalanobis(fit_mahalanobis(fit, shrink)?)
            }
            ScoreKind::Knn => {
                let fit = need(fit)?;
                let k = opts.knn_k.unwrap_or_else(|| default_k(fit.n_samples()));
                Scorer::Knn(fit_knn(fit, k)?)
            }
            ScoreKind::React => {
                let fit = need(fit)?;
                Scorer::React { threshold: react_threshold(fit, opts.react_percentile)? }
            }
            ScoreKind::Vim => {
                let fit = need(fit)?;
                let dim = opts.vim_dim.unwrap_or_else(|| default_subspace_dim(fit.feat_dim()));
                Scorer::Vim(fit_vim(fit, dim)?)
            }
        })
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            Scorer::Logit { kind, .. } => *kind,
            Scorer::Mahalanobis(_) => ScoreKind::Mahalanobis,
            Scorer::Knn(_) => ScoreKind::Knn,
            Scorer::React { .. } => ScoreKind::React,
            Scorer::Vim(_) => ScoreKind::Vim,
        }
    }

    pub fn score(&self, dump: &EvalDump) -> Result<ScoreVector> {
        match self {
            Scorer::Logit { kind, temperature } => match kind {
                ScoreKind::Msp => msp(&dump.logits),
                ScoreKind::Energy => energy(&dump.logits, *temperature),
                ScoreKind::Maxlogit => maxlogit(&dump.logits),
                ScoreKind::Margin => margin(&dump.logits),
                ScoreKind::Entropy => shannon_entropy(&dump.logits),
                ScoreKind::OdinT => odin_t(&dump.logits, *temperature),
                _ => unreachable!("feature detectors are not logit scorers"),
            },
            Scorer::Mahalanobis(m) => score_mahalanobis(m, &dump.features),
            Scorer::Knn(m) => score_knn(m, &dump.features),
            Scorer::React { threshold } => react::react_with_threshold(dump, *threshold),
            Scorer::Vim(m) => score_vim(m, dump),
        }
    }
}

/// Convenience: prepare and apply in one call.
pub fn compute_score(kind: ScoreKind, dump: &EvalDump, fit: Option<&EvalDump>, opts: &ScoreOptions) -> Result<ScoreVector> {
    Scorer::prepare(kind, fit, opts)?.score(dump)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBinaryManifest {
    pub score_name: String,
    pub direction: Direction,
    pub n: usize,
    pub dtype: String,
    pub file: String,
}

pub fn write_score_json(sv: &ScoreVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(sv)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| AuditError::io(path, e))
}

pub fn read_score_json(path: impl AsRef<Path>) -> Result<ScoreVector> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Writes `<stem>.bin` (float32 LE) and `<stem>.json` sidecar into `dir`.
pub fn write_score_binary(sv: &ScoreVector, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
    let file = format!("{stem}.bin");
    let bytes: Vec<u8> = sv.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let bin = dir.join(&file);
    fs::write(&bin, bytes).map_err(|e| AuditError::io(&bin, e))?;
    let manifest = ScoreBinaryManifest {
        score_name: sv.score_name.clone(),
        direction: sv.direction,
        n: sv.len(),
        dtype: "float32".into(),
        file,
    };
    let side = dir.join(format!("{stem}.json"));
    let mut s = serde_json::to_string_pretty(&manifest)?;
    s.push('\n');
    fs::write(&side, s).map_err(|e| AuditError::io(&side, e))
}

pub fn read_score_binary(dir: impl AsRef<Path>, stem: &str) -> Result<ScoreVector> {
    let dir = dir.as_ref();
    let side = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&side).map_err(|e| AuditError::io(&side, e))?;
    let m: ScoreBinaryManifest = serde_json::from_str(&text)?;
    if m.dtype != "float32" {
        return Err(AuditError::Manifest(format!("unsupported dtype {}", m.dtype)));
    }
    let bin = dir.join(&m.file);
    let bytes = fs::read(&bin).map_err(|e| AuditError::io(&bin, e))?;
    if bytes.len() != m.n * 4 {
        return Err(AuditError::LengthMismatch {
            array: "scores".into(),
            expected: m.n * 4,
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ScoreVector::new(m.score_name, m.direction, values))
}
