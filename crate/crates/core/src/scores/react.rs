//! Activation clipping followed by energy over the stored head.

use super::{energy, ScoreVector};
use crate::error::{AuditError, Result};
use crate::evaldump::EvalDump;
use crate::linalg::percentile_linear;

pub const DEFAULT_CLIP_PERCENTILE: f64 = 90.0;

/// Clip threshold: the `percentile`-th value over every fit feature entry.
/// `None` at 100, which disables clipping.
pub fn react_threshold(fit: &EvalDump, percentile: f64) -> Result<Option<f64>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(AuditError::InvalidArgument(format!(
            "clip percentile must be in (0,100], got {percentile}"
        )));
    }
    if percentile == 100.0 {
        return Ok(None);
    }
    if fit.features.is_empty() {
        return Err(AuditError::Empty("react needs fit features".into()));
    }
    Ok(Some(percentile_linear(fit.features.as_slice(), percentile)))
}

pub(crate) fn react_with_threshold(dump: &EvalDump, threshold: Option<f64>) -> Result<ScoreVector> {
    let head = dump.require_head("react")?;
    let logits = match threshold {
        None => head.apply(&dump.features),
        Some(t) => head.apply(&dump.features.map(|v| v.min(t))),
    };
    let mut sv = energy(&logits, 1.0)?;
    sv.score_name = "react".into();
    Ok(sv)
}

pub fn react_energy(dump: &EvalDump, fit: &EvalDump, clip_percentile: f64) -> Result<ScoreVector> {
    dump.require_head("react")?;
    let t = react_threshold(fit, clip_percentile)?;
    react_with_threshold(dump, t)
}
