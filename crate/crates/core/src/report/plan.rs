//! Evaluation plans: which dumps to read, which scores to run, where to write.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::geometry::GeometryOptions;
use crate::metrics::{FprConvention, DEFAULT_ECE_BINS};
use crate::scores::{ScoreKind, ScoreOptions};
use crate::taxonomy::TaxonomyOptions;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "OOD_AUDIT_OUT";
pub const DEFAULT_OUT: &str = "ood-audit-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPlan {
    pub id_test: Option<PathBuf>,
    pub fit: Option<PathBuf>,
    pub near_ood: Vec<PathBuf>,
    pub far_ood: Vec<PathBuf>,
    pub scores: Vec<ScoreKind>,
    /// Score used for the taxonomy.
    pub primary_score: ScoreKind,
    pub out_dir: Option<PathBuf>,
    pub method: String,
    pub dataset: String,
    pub noise: String,
    pub score_options: ScoreOptions,
    pub taxonomy: TaxonomyOptions,
    pub geometry: GeometryOptions,
    pub skip_geometry: bool,
    pub fpr_convention: FprConvention,
    pub ece_bins: usize,
}

impl Default for RunPlan {
    fn default() -> Self {
        Self {
            id_test: None,
            fit: None,
            near_ood: Vec::new(),
            far_ood: Vec::new(),
            scores: vec![ScoreKind::Energy],
            primary_score: ScoreKind::Energy,
            out_dir: None,
            method: "model".into(),
            dataset: "dataset".into(),
            noise: "unknown".into(),
            score_options: ScoreOptions::default(),
            taxonomy: TaxonomyOptions::default(),
            geometry: GeometryOptions::default(),
            skip_geometry: false,
            fpr_convention: FprConvention::IdAcceptance,
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunPlan {
    /// Reads a JSON plan; relative paths resolve against the plan's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| AuditError::InvalidArgument(format!("cannot read plan {}: {e}", path.display())))?;
        let mut plan: RunPlan =
            serde_json::from_str(&text).map_err(|e| AuditError::InvalidArgument(format!("invalid plan: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in plan
            .id_test
            .iter_mut()
            .chain(plan.fit.iter_mut())
            .chain(plan.near_ood.iter_mut())
            .chain(plan.far_ood.iter_mut())
            .chain(plan.out_dir.iter_mut())
        {
            resolve(base, p);
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuditError::InvalidArgument(m));
        let Some(id) = &self.id_test else {
            return bad("plan has no id_test dump".into());
        };
        if self.scores.is_empty() {
            return bad("plan lists no scores".into());
        }
        if self.ece_bins == 0 {
            return bad("ece_bins must be positive".into());
        }
        for p in std::iter::once(id)
            .chain(self.fit.iter())
            .chain(self.near_ood.iter())
            .chain(self.far_ood.iter())
        {
            if !p.exists() {
                return bad(format!("dump path does not exist: {}", p.display()));
            }
        }
        Ok(())
    }

    /// Explicit `out_dir`, else `$OOD_AUDIT_OUT`, else `ood-audit-out`.
    pub fn output_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}
