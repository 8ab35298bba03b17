//! The `eval` pipeline: scores, metrics, taxonomy, and geometry for one run.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::RunPlan;
use super::render::{render_benchmark, render_taxonomy};
use super::rows::{write_json, write_rows_csv, write_rows_json};
use crate::error::{AuditError, Result};
use crate::evaldump::{load_dump, EvalDump};
use crate::geometry::{geometry_report, pca_project_2d, write_projection_csv, GeometryReport};
use crate::linalg::{select_rows, vstack};
use crate::metrics::{accuracy, auroc, ece, fpr_at_95_tpr_with, nll, MetricRow};
use crate::scores::{orient_ood_larger, ScoreKind, ScoreVector, Scorer};
use crate::taxonomy::{id_wrong_set, taxonomy_report, TaxonomyReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub item: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<MetricRow>,
    pub taxonomy: Option<TaxonomyReport>,
    pub geometry: Option<GeometryReport>,
    /// Names and 2D coordinates for `projection.csv`.
    pub projection: Option<(Vec<String>, Vec<DMatrix<f64>>)>,
    pub skipped: Vec<Skipped>,
}

impl EvalOutcome {
    pub fn is_partial(&self) -> bool {
        !self.skipped.is_empty()
    }
}

/// Deterministic run summary written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scores: Vec<String>,
    pub skipped: Vec<Skipped>,
    pub partial: bool,
}

fn load_pool(paths: &[std::path::PathBuf], what: &str, skipped: &mut Vec<Skipped>) -> Vec<EvalDump> {
    paths
        .iter()
        .filter_map(|p| match load_dump(p) {
            Ok(d) => Some(d),
            Err(e) => {
                skipped.push(Skipped {
                    item: format!("{what}:{}", p.display()),
                    reason: e.to_string(),
                });
                None
            }
        })
        .collect()
}

fn pooled_score(scorer: &Scorer, dumps: &[EvalDump]) -> Result<Option<ScoreVector>> {
    if dumps.is_empty() {
        return Ok(None);
    }
    let parts = dumps
        .iter()
        .map(|d| scorer.score(d).map(|s| orient_ood_larger(&s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(ScoreVector::concat(&parts)?))
}

fn score_row(
    kind: ScoreKind,
    plan: &RunPlan,
    id: &EvalDump,
    fit: Option<&EvalDump>,
    near: &[EvalDump],
    far: &[EvalDump],
    base: &MetricRow,
) -> Result<MetricRow> {
    let scorer = Scorer::prepare(kind, fit, &plan.score_options)?;
    let id_score = orient_ood_larger(&scorer.score(id)?);
    let mut row = base.clone();
    row.score_name = kind.name().into();
    let pair = |ood: Option<ScoreVector>| -> Result<(Option<f64>, Option<f64>)> {
        match ood {
            Some(o) => Ok((
                Some(100.0 * auroc(&id_score, &o)?),
                Some(100.0 * fpr_at_95_tpr_with(&id_score, &o, plan.fpr_convention)?),
            )),
            None => Ok((None, None)),
        }
    };
    (row.near_auroc, row.near_fpr95) = pair(pooled_score(&scorer, near)?)?;
    (row.far_auroc, row.far_fpr95) = pair(pooled_score(&scorer, far)?)?;
    Ok(row)
}

/// Runs every requested score. Per-score and per-dump failures are recorded
/// in `skipped`; the call fails outright only when the ID test dump cannot
/// be used or when every score fails.
pub fn cmd_eval(plan: &RunPlan) -> Result<EvalOutcome> {
    plan.validate()?;
    let id_path = plan.id_test.as_ref().expect("validated");
    let id = load_dump(id_path)?;
    let labels = id.require_labels("eval")?.to_vec();
    let mut skipped = Vec::new();
    let fit = match &plan.fit {
        Some(p) => match load_dump(p) {
            Ok(d) => Some(d),
            Err(e) => {
                skipped.push(Skipped {
                    item: format!("fit:{}", p.display()),
                    reason: e.to_string(),
                });
                None
            }
        },
        None => None,
    };
    let near = load_pool(&plan.near_ood, "near_ood", &mut skipped);
    let far = load_pool(&plan.far_ood, "far_ood", &mut skipped);

    let mut base = MetricRow::new(&plan.method, &plan.dataset, &plan.noise, "");
    base.acc = Some(accuracy(&id.logits, &labels)?);
    base.ece = Some(ece(&id.logits, &labels, plan.ece_bins)?);
    base.nll = Some(nll(&id.logits, &labels)?);

    let results: Vec<(ScoreKind, Result<MetricRow>)> = plan
        .scores
        .par_iter()
        .map(|&k| (k, score_row(k, plan, &id, fit.as_ref(), &near, &far, &base)))
        .collect();
    let mut rows = Vec::new();
    let mut first_err = None;
    for (k, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("score {k} skipped: {e}");
                skipped.push(Skipped {
                    item: format!("score:{k}"),
                    reason: e.to_string(),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    if rows.is_empty() {
        return Err(first_err.unwrap_or_else(|| AuditError::Empty("no scores computed".into())));
    }

    let pool: &[EvalDump] = if far.is_empty() { &near } else { &far };
    let mut taxonomy = None;
    let mut geometry = None;
    let mut projection = None;
    if pool.is_empty() {
        skipped.push(Skipped {
            item: "taxonomy".into(),
            reason: "no OOD dumps".into(),
        });
    } else {
        let refs: Vec<&EvalDump> = pool.iter().collect();
        let tax = Scorer::prepare(plan.primary_score, fit.as_ref(), &plan.score_options)
            .and_then(|s| taxonomy_report(&id, &refs, &s, &plan.taxonomy));
        match tax {
            Ok(t) => taxonomy = Some(t),
            Err(e) => skipped.push(Skipped {
                item: "taxonomy".into(),
                reason: e.to_string(),
            }),
        }
        if !plan.skip_geometry {
            match run_geometry(plan, &id, &labels, pool) {
                Ok((g, p)) => {
                    geometry = Some(g);
                    projection = p;
                }
                Err(e) => skipped.push(Skipped {
                    item: "geometry".into(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(EvalOutcome {
        rows,
        taxonomy,
        geometry,
        projection,
        skipped,
    })
}

type Projection = Option<(Vec<String>, Vec<DMatrix<f64>>)>;

fn run_geometry(plan: &RunPlan, id: &EvalDump, labels: &[i32], pool: &[EvalDump]) -> Result<(GeometryReport, Projection)> {
    let d = id.feat_dim();
    if let Some(bad) = pool.iter().find(|p| p.feat_dim() != d) {
        return Err(AuditError::Shape(format!(
            "OOD dump {} has feature dim {}, ID has {d}",
            bad.name,
            bad.feat_dim()
        )));
    }
    let parts: Vec<&DMatrix<f64>> = pool.iter().map(|p| &p.features).collect();
    let ood = vstack(&parts);
    let report = geometry_report(id, &ood, &plan.geometry)?;
    let wrong = id_wrong_set(&id.logits, labels)?;
    let correct: Vec<usize> = (0..id.n_samples()).filter(|i| wrong.binary_search(i).is_err()).collect();
    let correct_f = select_rows(&id.features, &correct);
    let wrong_f = select_rows(&id.features, &wrong);
    let projection = pca_project_2d(&[&correct_f, &wrong_f, &ood])
        .map_err(|e| log::warn!("projection skipped: {e}"))
        .ok()
        .map(|p| (vec!["id_correct".to_string(), "id_wrong".into(), "ood".into()], p));
    Ok((report, projection))
}

/// Writes all artifacts under `dir`. Everything except `run_meta.json` is a
/// pure function of the plan and the dumps.
pub fn write_eval_outputs(outcome: &EvalOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tables = dir.join("tables");
    fs::create_dir_all(&tables).map_err(|e| AuditError::io(&tables, e))?;
    write_rows_json(&outcome.rows, dir.join("metrics.json"))?;
    write_rows_csv(&outcome.rows, dir.join("metrics.csv"))?;
    for row in &outcome.rows {
        let md = render_benchmark(std::slice::from_ref(row))?;
        let path = tables.join(format!("benchmark_{}.md", row.score_name));
        fs::write(&path, md).map_err(|e| AuditError::io(&path, e))?;
    }
    if let Some(t) = &outcome.taxonomy {
        write_json(t, dir.join("taxonomy.json"))?;
        let label = format!("{} {}", outcome.rows[0].dataset, outcome.rows[0].noise);
        let md = render_taxonomy(&[(label, t.clone())])?;
        let path = tables.join("taxonomy.md");
        fs::write(&path, md).map_err(|e| AuditError::io(&path, e))?;
    }
    if let Some(g) = &outcome.geometry {
        write_json(g, dir.join("geometry.json"))?;
    }
    if let Some((names, proj)) = &outcome.projection {
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        write_projection_csv(&names, proj, dir.join("projection.csv"))?;
    }
    let summary = RunSummary {
        scores: outcome.rows.iter().map(|r| r.score_name.clone()).collect(),
        skipped: outcome.skipped.clone(),
        partial: outcome.is_partial(),
    };
    write_json(&summary, dir.join("run_summary.json"))?;
    write_run_meta(dir)
}

/// Wall-clock metadata, kept apart from the reproducible outputs.
pub fn write_run_meta(dir: &Path) -> Result<()> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "created_unix": secs,
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&meta, dir.join("run_meta.json"))
}
