//! Benchmark, taxonomy, and paired-delta tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::metrics::MetricRow;
use crate::taxonomy::{Group, TaxonomyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Benchmark,
    Taxonomy,
    Paired,
}

impl FromStr for Layout {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benchmark" => Ok(Layout::Benchmark),
            "taxonomy" => Ok(Layout::Taxonomy),
            "paired" => Ok(Layout::Paired),
            other => Err(AuditError::InvalidArgument(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    #[default]
    Markdown,
    Csv,
}

impl FromStr for TableFormat {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(AuditError::InvalidArgument(format!("unknown table format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    None,
    Bold,
    Underline,
}

/// Values compared at the displayed precision (one decimal).
fn tenths(v: f64) -> i64 {
    (v * 10.0).round() as i64
}

/// Every cell equal to the best value is bold. When exactly one cell is
/// best, the next value is underlined if exactly one cell holds it.
pub fn column_marks(values: &[Option<f64>], higher_is_better: bool) -> Vec<Mark> {
    let keys: Vec<Option<i64>> = values
        .iter()
        .map(|v| v.filter(|x| x.is_finite()).map(|x| if higher_is_better { -tenths(x) } else { tenths(x) }))
        .collect();
    let mut marks = vec![Mark::None; values.len()];
    let Some(best) = keys.iter().flatten().min().copied() else {
        return marks;
    };
    let best_idx: Vec<usize> = (0..keys.len()).filter(|&i| keys[i] == Some(best)).collect();
    for &i in &best_idx {
        marks[i] = Mark::Bold;
    }
    if best_idx.len() == 1 {
        if let Some(second) = keys.iter().flatten().filter(|&&k| k != best).min().copied() {
            let second_idx: Vec<usize> = (0..keys.len()).filter(|&i| keys[i] == Some(second)).collect();
            if let [only] = second_idx[..] {
                marks[only] = Mark::Underline;
            }
        }
    }
    marks
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.1}"),
        None => "n/a".into(),
    }
}

fn md_cell(v: Option<f64>, mark: Mark) -> String {
    let s = fmt_value(v);
    match mark {
        Mark::Bold => format!("**{s}**"),
        Mark::Underline => format!("<u>{s}</u>"),
        Mark::None => s,
    }
}

fn md_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn md_rule(n: usize) -> String {
    md_row(&vec!["---".to_string(); n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMetric {
    Acc,
    NearAuroc,
    NearFpr95,
    FarAuroc,
    FarFpr95,
}

impl BenchMetric {
    pub const ALL: [BenchMetric; 5] = [
        BenchMetric::Acc,
        BenchMetric::NearAuroc,
        BenchMetric::NearFpr95,
        BenchMetric::FarAuroc,
        BenchMetric::FarFpr95,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BenchMetric::Acc => "ACC↑",
            BenchMetric::NearAuroc => "Near AUROC↑",
            BenchMetric::NearFpr95 => "Near FPR95↓",
            BenchMetric::FarAuroc => "Far AUROC↑",
            BenchMetric::FarFpr95 => "Far FPR95↓",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, BenchMetric::Acc | BenchMetric::NearAuroc | BenchMetric::FarAuroc)
    }

    pub fn get(self, row: &MetricRow) -> Option<f64> {
        match self {
            BenchMetric::Acc => row.acc,
            BenchMetric::NearAuroc => row.near_auroc,
            BenchMetric::NearFpr95 => row.near_fpr95,
            BenchMetric::FarAuroc => row.far_auroc,
            BenchMetric::FarFpr95 => row.far_fpr95,
        }
    }
}

impl fmt::Display for BenchMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub value: Option<f64>,
    pub mark: Mark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkLine {
    pub method: String,
    pub metric: BenchMetric,
    pub cells: Vec<Cell>,
}

/// Methods (sorted) × five metrics down, settings (first appearance) across.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub score_name: String,
    pub settings: Vec<(String, String)>,
    pub lines: Vec<BenchmarkLine>,
}

impl BenchmarkTable {
    pub fn cell(&self, method: &str, metric: BenchMetric, dataset: &str, noise: &str) -> Option<&Cell> {
        let col = self.settings.iter().position(|(d, n)| d == dataset && n == noise)?;
        self.lines
            .iter()
            .find(|l| l.method == method && l.metric == metric)
            .map(|l| &l.cells[col])
    }

    fn setting_labels(&self) -> Vec<String> {
        self.settings.iter().map(|(d, n)| format!("{d} {n}")).collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut header = vec!["Method".to_string(), "Metric".to_string()];
        header.extend(self.setting_labels());
        let mut out = md_row(&header);
        out += &md_rule(header.len());
        let mut last = "";
        for line in &self.lines {
            let name = if line.method == last { String::new() } else { format!("**{}**", line.method) };
            last = &line.method;
            let mut cells = vec![name, line.metric.label().to_string()];
            cells.extend(line.cells.iter().map(|c| md_cell(c.value, c.mark)));
            out += &md_row(&cells);
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "metric".to_string()];
        header.extend(self.setting_labels());
        w.write_record(&header)?;
        for line in &self.lines {
            let mut rec = vec![line.method.clone(), line.metric.label().to_string()];
            rec.extend(line.cells.iter().map(|c| fmt_value(c.value)));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| AuditError::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| AuditError::Serde(e.to_string()))
    }
}

fn first_appearance<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

pub fn benchmark_table(rows: &[MetricRow]) -> Result<BenchmarkTable> {
    if rows.is_empty() {
        return Err(AuditError::Empty("no metric rows to render".into()));
    }
    let scores = first_appearance(rows.iter().map(|r| r.score_name.clone()));
    if scores.len() > 1 {
        return Err(AuditError::InvalidArgument(format!(
            "benchmark layout needs one score family, got {}",
            scores.join(", ")
        )));
    }
    let settings = first_appearance(rows.iter().map(|r| (r.dataset.clone(), r.noise.clone())));
    let mut methods = first_appearance(rows.iter().map(|r| r.method.clone()));
    methods.sort();
    let mut grid: Vec<Vec<Option<&MetricRow>>> = vec![vec![None; settings.len()]; methods.len()];
    for r in rows {
        let m = methods.iter().position(|x| *x == r.method).expect("method collected above");
        let s = settings
            .iter()
            .position(|(d, n)| *d == r.dataset && *n == r.noise)
            .expect("setting collected above");
        if grid[m][s].is_some() {
            return Err(AuditError::InvalidArgument(format!(
                "duplicate row for {} / {} {}",
                r.method, r.dataset, r.noise
            )));
        }
        grid[m][s] = Some(r);
    }
    let mut lines = Vec::with_capacity(methods.len() * 5);
    for (mi, method) in methods.iter().enumerate() {
        for metric in BenchMetric::ALL {
            let cells = (0..settings.len())
                .map(|s| Cell {
                    value: grid[mi][s].and_then(|r| metric.get(r)),
                    mark: Mark::None,
                })
                .collect();
            lines.push(BenchmarkLine {
                method: method.clone(),
                metric,
                cells,
            });
        }
    }
    for metric in BenchMetric::ALL {
        for s in 0..settings.len() {
            let idx: Vec<usize> = (0..lines.len()).filter(|&i| lines[i].metric == metric).collect();
            let values: Vec<Option<f64>> = idx.iter().map(|&i| lines[i].cells[s].value).collect();
            for (&i, mark) in idx.iter().zip(column_marks(&values, metric.higher_is_better())) {
                lines[i].cells[s].mark = mark;
            }
        }
    }
    Ok(BenchmarkTable {
        score_name: scores.into_iter().next().unwrap_or_default(),
        settings,
        lines,
    })
}

pub fn render_benchmark(rows: &[MetricRow]) -> Result<String> {
    Ok(benchmark_table(rows)?.to_markdown())
}

/// Taxonomy reports side by side: AU (fraction, one decimal) and mass
/// percent per stratum. Skipped or empty strata show `---`.
pub fn render_taxonomy(columns: &[(String, TaxonomyReport)]) -> Result<String> {
    if columns.is_empty() {
        return Err(AuditError::Empty("no taxonomy reports to render".into()));
    }
    let mut header = vec!["Group".to_string()];
    for (label, _) in columns {
        header.push(format!("{label} AU↑"));
        header.push(format!("{label} m%"));
    }
    let mut out = md_row(&header);
    out += &md_rule(header.len());
    for g in Group::ALL {
        let emphasize = g == Group::IdWrongLow;
        let mut cells = vec![if emphasize { format!("**{}**", g.label()) } else { g.label().to_string() }];
        for (_, rep) in columns {
            let st = rep.group(g);
            cells.push(match st.auroc {
                Some(a) if emphasize => format!("**{a:.1}**"),
                Some(a) => format!("{a:.1}"),
                None => "---".into(),
            });
            cells.push(format!("{:.1}", st.mass_pct));
        }
        out += &md_row(&cells);
    }
    Ok(out)
}

/// Far-OOD AUROC and accuracy of a baseline and a repaired checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub setting: String,
    pub baseline_far_auroc: f64,
    pub repaired_far_auroc: f64,
    pub baseline_acc: f64,
    pub repaired_acc: f64,
}

fn displayed_delta(before: f64, after: f64) -> f64 {
    (tenths(after) - tenths(before)) as f64 / 10.0
}

impl PairedRow {
    /// Far-OOD AUROC change at display precision.
    pub fn delta(&self) -> f64 {
        displayed_delta(self.baseline_far_auroc, self.repaired_far_auroc)
    }

    /// Accuracy change at display precision.
    pub fn id_delta(&self) -> f64 {
        displayed_delta(self.baseline_acc, self.repaired_acc)
    }
}

pub fn fmt_signed(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:+.1}")
}

/// Pairs rows of exactly two methods by `(dataset, noise, score)`; the
/// method seen first is the baseline.
pub fn paired_rows(rows: &[MetricRow]) -> Result<(String, String, Vec<PairedRow>)> {
    let methods = first_appearance(rows.iter().map(|r| r.method.clone()));
    let [base, rep] = &methods[..] else {
        return Err(AuditError::InvalidArgument(format!(
            "paired layout needs exactly two methods, got {}",
            methods.len()
        )));
    };
    let datasets = first_appearance(rows.iter().map(|r| r.dataset.clone()));
    let mut out = Vec::new();
    for b in rows.iter().filter(|r| &r.method == base) {
        let r = rows
            .iter()
            .find(|r| &r.method == rep && r.dataset == b.dataset && r.noise == b.noise && r.score_name == b.score_name)
            .ok_or_else(|| AuditError::InvalidArgument(format!("no {rep} row for {} {}", b.dataset, b.noise)))?;
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| AuditError::InvalidArgument(format!("{what} missing for {} {}", b.dataset, b.noise)))
        };
        out.push(PairedRow {
            setting: if datasets.len() > 1 { format!("{} {}", b.dataset, b.noise) } else { b.noise.clone() },
            baseline_far_auroc: need(b.far_auroc, "far_auroc")?,
            repaired_far_auroc: need(r.far_auroc, "far_auroc")?,
            baseline_acc: need(b.acc, "acc")?,
            repaired_acc: need(r.acc, "acc")?,
        });
    }
    if out.len() != rows.len() / 2 || rows.len() % 2 != 0 {
        return Err(AuditError::InvalidArgument("paired rows are unbalanced between the two methods".into()));
    }
    Ok((base.clone(), rep.clone(), out))
}

/// `Setting | baseline | repaired | Δ | IDΔ`; the larger AUROC is bold.
pub fn render_paired(baseline: &str, repaired: &str, rows: &[PairedRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(AuditError::Empty("no paired rows to render".into()));
    }
    let mut out = md_row(&[
        "Setting".to_string(),
        baseline.to_string(),
        repaired.to_string(),
        "Δ".to_string(),
        "IDΔ".to_string(),
    ]);
    out += &md_rule(5);
    for r in rows {
        let marks = column_marks(&[Some(r.baseline_far_auroc), Some(r.repaired_far_auroc)], true);
        let bold_only = |m: Mark| if m == Mark::Bold && marks.iter().filter(|&&x| x == Mark::Bold).count() == 1 { Mark::Bold } else { Mark::None };
        out += &md_row(&[
            r.setting.clone(),
            md_cell(Some(r.baseline_far_auroc), bold_only(marks[0])),
            md_cell(Some(r.repaired_far_auroc), bold_only(marks[1])),
            fmt_signed(r.delta()),
            fmt_signed(r.id_delta()),
        ]);
    }
    Ok(out)
}

/// Renders metric rows in the benchmark or paired layout.
pub fn render_table(rows: &[MetricRow], layout: Layout, format: TableFormat) -> Result<String> {
    match (layout, format) {
        (Layout::Benchmark, TableFormat::Markdown) => render_benchmark(rows),
        (Layout::Benchmark, TableFormat::Csv) => benchmark_table(rows)?.to_csv(),
        (Layout::Paired, TableFormat::Markdown) => {
            let (b, r, paired) = paired_rows(rows)?;
            render_paired(&b, &r, &paired)
        }
        (Layout::Paired, TableFormat::Csv) => {
            let (_, _, paired) = paired_rows(rows)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["setting", "baseline", "repaired", "delta", "id_delta"])?;
            for p in &paired {
                w.write_record([
                    p.setting.clone(),
                    format!("{:.1}", p.baseline_far_auroc),
                    format!("{:.1}", p.repaired_far_auroc),
                    fmt_signed(p.delta()),
                    fmt_signed(p.id_delta()),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| AuditError::Serde(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| AuditError::Serde(e.to_string()))
        }
        (Layout::Taxonomy, _) => Err(AuditError::InvalidArgument(
            "taxonomy layout renders taxonomy reports, not metric rows".into(),
        )),
    }
}
