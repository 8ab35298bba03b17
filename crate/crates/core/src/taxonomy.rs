//! Uncertainty-collapse diagnostics.
//!
//! ID test samples are split by correctness and by confidence (MSP strictly
//! above the median is "high"; ties go low). Each stratum is then scored
//! against the pooled OOD set with the stratum as negatives and OOD as
//! positives. A stratum whose AUROC sits near or below chance while holding
//! non-trivial mass is flagged as collapsed.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::evaldump::EvalDump;
use crate::linalg::median;
use crate::metrics::{auroc_values, predictions};
use crate::scores::{msp, orient_ood_larger, Direction, ScoreVector, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    IdCorrectHigh,
    IdCorrectLow,
    IdWrongHigh,
    IdWrongLow,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::IdCorrectHigh, Group::IdCorrectLow, Group::IdWrongHigh, Group::IdWrongLow];

    pub fn name(self) -> &'static str {
        match self {
            Group::IdCorrectHigh => "id_correct_high",
            Group::IdCorrectLow => "id_correct_low",
            Group::IdWrongHigh => "id_wrong_high",
            Group::IdWrongLow => "id_wrong_low",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::IdCorrectHigh => "ID-correct high-conf",
            Group::IdCorrectLow => "ID-correct low-conf",
            Group::IdWrongHigh => "ID-wrong high-conf",
            Group::IdWrongLow => "ID-wrong low-conf",
        }
    }

    pub fn is_wrong(self) -> bool {
        matches!(self, Group::IdWrongHigh | Group::IdWrongLow)
    }

    fn index(self) -> usize {
        self as usize
    }

    fn of(wrong: bool, high: bool) -> Group {
        match (wrong, high) {
            (false, true) => Group::IdCorrectHigh,
            (false, false) => Group::IdCorrectLow,
            (true, true) => Group::IdWrongHigh,
            (true, false) => Group::IdWrongLow,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Indices of misclassified ID samples (argmax ≠ clean label).
pub fn id_wrong_set(logits: &DMatrix<f64>, labels: &[i32]) -> Result<Vec<usize>> {
    if labels.len() != logits.nrows() {
        return Err(AuditError::Shape(format!("{} labels for {} logit rows", labels.len(), logits.nrows())));
    }
    Ok(predictions(logits)
        .into_iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, &y))| *p as i64 != y as i64)
        .map(|(i, _)| i)
        .collect())
}

/// Where the confidence threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianMode {
    /// One median over the whole ID test set.
    #[default]
    Global,
    /// Separate medians inside the correct and the wrong groups.
    PerGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub groups: Vec<Group>,
    /// Global median (also reported in per-group mode).
    pub msp_median: f64,
    pub mode: MedianMode,
    /// `[correct, wrong]` medians in per-group mode.
    pub group_medians: Option<[f64; 2]>,
}

impl GroupAssignment {
    pub fn members(&self, g: Group) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == g)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for g in &self.groups {
            c[g.index()] += 1;
        }
        c
    }
}

fn wrong_mask(n: usize, wrong: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in wrong {
        if i >= n {
            return Err(AuditError::InvalidArgument(format!("wrong index {i} out of range for n={n}")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

pub fn five_group_split(msp: &ScoreVector, wrong: &[usize]) -> Result<GroupAssignment> {
    five_group_split_with(msp, wrong, MedianMode::Global)
}

/// Assigns each ID sample to one of the four ID strata.
pub fn five_group_split_with(msp: &ScoreVector, wrong: &[usize], mode: MedianMode) -> Result<GroupAssignment> {
    if msp.is_empty() {
        return Err(AuditError::Empty("ID set is empty".into()));
    }
    if msp.direction != Direction::IdLarger {
        return Err(AuditError::InvalidArgument(
            "confidence split expects raw MSP (id_larger), not an oriented score".into(),
        ));
    }
    let n = msp.len();
    let mask = wrong_mask(n, wrong)?;
    let global = median(&msp.values);
    let (groups, group_medians) = match mode {
        MedianMode::Global => (
            (0..n).map(|i| Group::of(mask[i], msp.values[i] > global)).collect(),
            None,
        ),
        MedianMode::PerGroup => {
            let side_median = |w: bool| {
                let v: Vec<f64> = (0..n).filter(|&i| mask[i] == w).map(|i| msp.values[i]).collect();
                if v.is_empty() {
                    f64::INFINITY
                } else {
                    median(&v)
                }
            };
            let meds = [side_median(false), side_median(true)];
            (
                (0..n)
                    .map(|i| Group::of(mask[i], msp.values[i] > meds[mask[i] as usize]))
                    .collect(),
                Some(meds),
            )
        }
    };
    Ok(GroupAssignment {
        groups,
        msp_median: global,
        mode,
        group_medians,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaxonomyOptions {
    pub median_mode: MedianMode,
    /// Leave the ID-correct high-confidence AUROC out (rendered as `---`).
    pub skip_correct_high: bool,
    pub collapse_threshold: f64,
    /// Minimum group mass, in percent, for a collapse flag.
    pub mass_gate_pct: f64,
}

impl Default for TaxonomyOptions {
    fn default() -> Self {
        Self {
            median_mode: MedianMode::Global,
            skip_correct_high: false,
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
            mass_gate_pct: 1.0,
        }
    }
}

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: Group,
    pub count: usize,
    pub mass_pct: f64,
    /// Stratum-vs-pooled-OOD AUROC; `None` when empty or skipped.
    pub auroc: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub score_name: String,
    pub median: f64,
    pub median_mode: MedianMode,
    pub n_id: usize,
    pub n_ood: usize,
    pub groups: Vec<GroupStats>,
    pub id_wrong_vs_ood_auroc: Option<f64>,
    pub id_vs_ood_auroc: f64,
    pub correct_high_skipped: bool,
}

impl TaxonomyReport {
    pub fn group(&self, g: Group) -> &GroupStats {
        &self.groups[g.index()]
    }

    /// Percent of ID test that is misclassified.
    pub fn wrong_mass_pct(&self) -> f64 {
        self.group(Group::IdWrongHigh).mass_pct + self.group(Group::IdWrongLow).mass_pct
    }

    pub fn collapse_flags(&self) -> Vec<(Group, bool)> {
        self.groups.iter().map(|g| (g.name, g.flagged)).collect()
    }
}

/// `true` iff the group's AUROC is below `threshold` and its mass exceeds the gate.
pub fn collapse_flags(report: &TaxonomyReport, threshold: f64, mass_gate_pct: f64) -> Vec<(Group, bool)> {
    report
        .groups
        .iter()
        .map(|g| (g.name, is_collapsed(g.auroc, g.mass_pct, threshold, mass_gate_pct)))
        .collect()
}

fn is_collapsed(auroc: Option<f64>, mass_pct: f64, threshold: f64, gate: f64) -> bool {
    matches!(auroc, Some(a) if a < threshold) && mass_pct > gate
}

/// Core of the taxonomy on precomputed vectors. `id_score` and `ood_score`
/// are oriented to OOD-larger; `msp` must align with `id_score`.
pub fn taxonomy_from_scores(
    msp: &ScoreVector,
    wrong: &[usize],
    id_score: &ScoreVector,
    ood_score: &ScoreVector,
    opts: &TaxonomyOptions,
) -> Result<TaxonomyReport> {
    if id_score.direction != Direction::OodLarger || ood_score.direction != Direction::OodLarger {
        return Err(AuditError::InvalidArgument("taxonomy scores must be oriented ood_larger".into()));
    }
    if id_score.len() != msp.len() {
        return Err(AuditError::Shape(format!("{} scores for {} MSP values", id_score.len(), msp.len())));
    }
    if ood_score.is_empty() {
        return Err(AuditError::Empty("pooled OOD set is empty".into()));
    }
    let assignment = five_group_split_with(msp, wrong, opts.median_mode)?;
    let n = msp.len();
    let counts = assignment.counts();
    let groups = Group::ALL
        .iter()
        .map(|&g| {
            let members = assignment.members(g);
            let mass_pct = 100.0 * counts[g.index()] as f64 / n as f64;
            let skip = g == Group::IdCorrectHigh && opts.skip_correct_high;
            let auroc = (!members.is_empty() && !skip).then(|| {
                let neg: Vec<f64> = members.iter().map(|&i| id_score.values[i]).collect();
                auroc_values(&neg, &ood_score.values)
            });
            GroupStats {
                name: g,
                count: counts[g.index()],
                mass_pct,
                auroc,
                flagged: is_collapsed(auroc, mass_pct, opts.collapse_threshold, opts.mass_gate_pct),
            }
        })
        .collect();
    let wrong_scores: Vec<f64> = wrong.iter().map(|&i| id_score.values[i]).collect();
    Ok(TaxonomyReport {
        score_name: id_score.score_name.clone(),
        median: assignment.msp_median,
        median_mode: opts.median_mode,
        n_id: n,
        n_ood: ood_score.len(),
        groups,
        id_wrong_vs_ood_auroc: (!wrong_scores.is_empty()).then(|| auroc_values(&wrong_scores, &ood_score.values)),
        id_vs_ood_auroc: auroc_values(&id_score.values, &ood_score.values),
        correct_high_skipped: opts.skip_correct_high,
    })
}

/// Full taxonomy from dumps: MSP and the wrong set from the ID logits, the
/// chosen score on ID and on the concatenated OOD dumps.
pub fn taxonomy_report(
    id_dump: &EvalDump,
    ood_dumps: &[&EvalDump],
    scorer: &Scorer,
    opts: &TaxonomyOptions,
) -> Result<TaxonomyReport> {
    let labels = id_dump.require_labels("taxonomy")?;
    if ood_dumps.is_empty() {
        return Err(AuditError::Empty("taxonomy needs at least one OOD dump".into()));
    }
    let confidence = msp(&id_dump.logits)?;
    let wrong = id_wrong_set(&id_dump.logits, labels)?;
    let id_score = orient_ood_larger(&scorer.score(id_dump)?);
    let ood_parts = ood_dumps
        .iter()
        .map(|d| scorer.score(d).map(|s| orient_ood_larger(&s)))
        .collect::<Result<Vec<_>>>()?;
    let ood_score = ScoreVector::concat(&ood_parts)?;
    taxonomy_from_scores(&confidence, &wrong, &id_score, &ood_score, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Worsened,
    Improved,
    Unchanged,
}

/// Paired comparison of two taxonomy reports (second minus first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseDelta {
    pub score_name: String,
    pub auroc_before: f64,
    pub auroc_after: f64,
    pub delta_id_wrong_vs_ood_auroc: f64,
    pub delta_wrong_mass_pct: f64,
    pub verdict: Verdict,
}

/// AUROC changes within this band (one percentage point) count as unchanged.
pub const VERDICT_BAND: f64 = 0.01;

pub fn clean_vs_noise_delta(report_clean: &TaxonomyReport, report_noisy: &TaxonomyReport) -> Result<CollapseDelta> {
    paired_delta(report_clean, report_noisy)
}

/// Delta from `before` to `after` for any paired pair of reports.
pub fn paired_delta(before: &TaxonomyReport, after: &TaxonomyReport) -> Result<CollapseDelta> {
    if before.score_name != after.score_name {
        return Err(AuditError::InvalidArgument(format!(
            "score-family mismatch: {} vs {}",
            before.score_name, after.score_name
        )));
    }
    if before.n_ood != after.n_ood {
        return Err(AuditError::InvalidArgument(format!(
            "OOD pool mismatch: {} vs {} samples",
            before.n_ood, after.n_ood
        )));
    }
    let (a, b) = match (before.id_wrong_vs_ood_auroc, after.id_wrong_vs_ood_auroc) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(AuditError::Empty("ID-wrong set is empty in one report".into())),
    };
    let delta = b - a;
    let verdict = if delta < -VERDICT_BAND {
        Verdict::Worsened
    } else if delta > VERDICT_BAND {
        Verdict::Improved
    } else {
        Verdict::Unchanged
    };
    Ok(CollapseDelta {
        score_name: before.score_name.clone(),
        auroc_before: a,
        auroc_after: b,
        delta_id_wrong_vs_ood_auroc: delta,
        delta_wrong_mass_pct: after.wrong_mass_pct() - before.wrong_mass_pct(),
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Sum counts over all reports, then take the share.
    Samples,
    /// Average the per-report shares.
    Reports,
}

/// Percent of ID-wrong mass that sits in the low-confidence stratum,
/// aggregated over several reports.
pub fn wrong_low_share(reports: &[TaxonomyReport], mode: PoolingMode) -> Result<f64> {
    let per: Vec<(usize, usize)> = reports
        .iter()
        .map(|r| {
            let low = r.group(Group::IdWrongLow).count;
            (low, low + r.group(Group::IdWrongHigh).count)
        })
        .filter(|&(_, total)| total > 0)
        .collect();
    if per.is_empty() {
        return Err(AuditError::Empty("no ID-wrong samples in any report".into()));
    }
    Ok(match mode {
        PoolingMode::Samples => {
            let (low, total) = per.iter().fold((0, 0), |(a, b), &(l, t)| (a + l, b + t));
            100.0 * low as f64 / total as f64
        }
        PoolingMode::Reports => {
            100.0 * per.iter().map(|&(l, t)| l as f64 / t as f64).sum::<f64>() / per.len() as f64
        }
    })
}
