use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ood_audit::error::{AuditError, Result};
use ood_audit::evaldump::{load_dump, validate_dump, EvalDump};
use ood_audit::geometry::{geometry_report, pca_project_2d, write_projection_csv, GeometryOptions};
use ood_audit::linalg::{select_rows, vstack};
use ood_audit::report::{
    cmd_compare, cmd_eval, read_rows, render_paired, render_table, render_taxonomy, write_eval_outputs, write_json,
    write_rows_csv, write_run_meta, Layout, RunPlan, TableFormat,
};
use ood_audit::scores::{compute_score, write_score_json, ScoreKind, ScoreOptions, Scorer};
use ood_audit::taxonomy::{id_wrong_set, taxonomy_report, TaxonomyOptions, TaxonomyReport};
use ood_audit::vmr::{vmr_experiment_with_outputs, NoiseKind, TaskConfig, VmrConfig};

const EXIT_INVALID: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

/// Like `print!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "ood-audit", version, about = "Open-world reliability audit for frozen classifiers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full audit: scores, metrics, taxonomy, geometry, tables.
    Eval(EvalArgs),
    /// One score over one dump.
    Score(ScoreArgs),
    /// Four-group collapse taxonomy.
    Taxonomy(TaxonomyArgs),
    /// Participation ratio, intrinsic dimension, drift alignment.
    Geometry(GeometryArgs),
    /// Paired baseline / regularized training on a synthetic noisy-label task.
    VmrDemo(VmrArgs),
    /// Per-metric deltas between two metric files.
    Compare(CompareArgs),
    /// Markdown or CSV tables from metric rows or taxonomy reports.
    Render(RenderArgs),
    /// Checks dump directories against the format invariants.
    Validate(ValidateArgs),
}

fn parse_scores(s: &str) -> Result<Vec<ScoreKind>> {
    s.split(',').map(|x| x.trim().parse()).collect()
}

#[derive(Args)]
struct EvalArgs {
    /// JSON plan; flags override its fields.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    id_test: Option<PathBuf>,
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    near: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    far: Vec<PathBuf>,
    /// Comma-separated score names.
    #[arg(long)]
    scores: Option<String>,
    #[arg(long)]
    primary_score: Option<ScoreKind>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    energy_temperature: Option<f64>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    react_percentile: Option<f64>,
    #[arg(long)]
    skip_correct_high: bool,
    #[arg(long)]
    skip_geometry: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    score: ScoreKind,
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Options as JSON, e.g. '{"knn_k": 10}'.
    #[arg(long)]
    options: Option<String>,
    /// Output JSON file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TaxonomyArgs {
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    ood: Vec<PathBuf>,
    #[arg(long, default_value = "energy")]
    score: ScoreKind,
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long)]
    skip_correct_high: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    ood: Vec<PathBuf>,
    #[arg(long, default_value_t = ood_audit::geometry::DEFAULT_K_MIN)]
    k_min: usize,
    #[arg(long, default_value_t = ood_audit::geometry::DEFAULT_K_MAX)]
    k_max: usize,
    /// Directory for geometry.json and projection.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VmrDemoConfig {
    task: TaskConfig,
    vmr: VmrConfig,
    seeds: Vec<u64>,
}

#[derive(Args)]
struct VmrArgs {
    /// JSON with `task`, `vmr`, and `seeds`; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds (default 0,1,2,3,4).
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    noise_kind: Option<String>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    /// Writes the comparison as JSON here; markdown goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// metrics.csv / metrics.json, or taxonomy JSON files as `label=path`.
    #[arg(required = true)]
    inputs: Vec<String>,
    #[arg(long, default_value = "benchmark")]
    layout: Layout,
    #[arg(long, default_value = "markdown")]
    format: TableFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true)]
    dumps: Vec<PathBuf>,
}

enum Status {
    Ok,
    Partial,
    DataError,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| AuditError::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            out!("{text}");
            Ok(())
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| AuditError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn run_eval(a: EvalArgs) -> Result<Status> {
    let mut plan = match &a.plan {
        Some(p) => RunPlan::from_file(p)?,
        None => RunPlan::default(),
    };
    if a.id_test.is_some() {
        plan.id_test = a.id_test;
    }
    if a.fit.is_some() {
        plan.fit = a.fit;
    }
    if !a.near.is_empty() {
        plan.near_ood = a.near;
    }
    if !a.far.is_empty() {
        plan.far_ood = a.far;
    }
    if let Some(s) = &a.scores {
        plan.scores = parse_scores(s)?;
    }
    if let Some(s) = a.primary_score {
        plan.primary_score = s;
    }
    if a.out.is_some() {
        plan.out_dir = a.out;
    }
    if let Some(m) = a.method {
        plan.method = m;
    }
    if let Some(d) = a.dataset {
        plan.dataset = d;
    }
    if let Some(n) = a.noise {
        plan.noise = n;
    }
    if let Some(t) = a.energy_temperature {
        plan.score_options.energy_temperature = t;
    }
    if a.knn_k.is_some() {
        plan.score_options.knn_k = a.knn_k;
    }
    if let Some(p) = a.react_percentile {
        plan.score_options.react_percentile = p;
    }
    plan.taxonomy.skip_correct_high |= a.skip_correct_high;
    plan.skip_geometry |= a.skip_geometry;

    let outcome = cmd_eval(&plan)?;
    let dir = plan.output_dir();
    write_eval_outputs(&outcome, &dir)?;
    for s in &outcome.skipped {
        eprintln!("skipped {}: {}", s.item, s.reason);
    }
    eprintln!("wrote {}", dir.display());
    Ok(if outcome.is_partial() { Status::Partial } else { Status::Ok })
}

fn run_score(a: ScoreArgs) -> Result<Status> {
    let opts: ScoreOptions = match &a.options {
        Some(s) => serde_json::from_str(s).map_err(|e| AuditError::InvalidArgument(format!("invalid options: {e}")))?,
        None => ScoreOptions::default(),
    };
    let dump = load_dump(&a.dump)?;
    let fit = a.fit.as_ref().map(load_dump).transpose()?;
    let sv = compute_score(a.score, &dump, fit.as_ref(), &opts)?;
    match &a.out {
        Some(p) => write_score_json(&sv, p)?,
        None => outln!("{}", serde_json::to_string_pretty(&sv)?),
    }
    Ok(Status::Ok)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<EvalDump>> {
    paths.iter().map(load_dump).collect()
}

fn run_taxonomy(a: TaxonomyArgs) -> Result<Status> {
    let id = load_dump(&a.id_test)?;
    let ood = load_all(&a.ood)?;
    let fit = a.fit.as_ref().map(load_dump).transpose()?;
    let scorer = Scorer::prepare(a.score, fit.as_ref(), &ScoreOptions::default())?;
    let opts = TaxonomyOptions {
        skip_correct_high: a.skip_correct_high,
        ..Default::default()
    };
    let refs: Vec<&EvalDump> = ood.iter().collect();
    let report = taxonomy_report(&id, &refs, &scorer, &opts)?;
    match &a.out {
        Some(p) => write_json(&report, p)?,
        None => outln!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(Status::Ok)
}

fn run_geometry(a: GeometryArgs) -> Result<Status> {
    let id = load_dump(&a.id_test)?;
    let ood = load_all(&a.ood)?;
    let parts: Vec<_> = ood.iter().map(|d| &d.features).collect();
    let ood_f = vstack(&parts);
    let opts = GeometryOptions {
        k_min: a.k_min,
        k_max: a.k_max,
    };
    let report = geometry_report(&id, &ood_f, &opts)?;
    create_dir(&a.out)?;
    write_json(&report, a.out.join("geometry.json"))?;
    let labels = id.require_labels("geometry")?;
    let wrong = id_wrong_set(&id.logits, labels)?;
    let correct: Vec<usize> = (0..id.n_samples()).filter(|i| wrong.binary_search(i).is_err()).collect();
    let c = select_rows(&id.features, &correct);
    let w = select_rows(&id.features, &wrong);
    let proj = pca_project_2d(&[&c, &w, &ood_f])?;
    write_projection_csv(&["id_correct", "id_wrong", "ood"], &proj, a.out.join("projection.csv"))?;
    write_run_meta(&a.out)?;
    Ok(Status::Ok)
}

fn run_vmr(a: VmrArgs) -> Result<Status> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| AuditError::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| AuditError::InvalidArgument(format!("invalid config: {e}")))?
        }
        None => VmrDemoConfig::default(),
    };
    if let Some(s) = &a.seeds {
        cfg.seeds = s
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| AuditError::InvalidArgument(format!("bad seed {x:?}"))))
            .collect::<Result<_>>()?;
    }
    if cfg.seeds.is_empty() {
        cfg.seeds = (0..5).collect();
    }
    if let Some(k) = &a.noise_kind {
        cfg.task.noise_kind = match k.as_str() {
            "sym" | "symmetric" => NoiseKind::Symmetric,
            "asym" | "asymmetric" => NoiseKind::Asymmetric,
            other => return Err(AuditError::InvalidArgument(format!("unknown noise kind {other:?}"))),
        };
    }
    if let Some(r) = a.noise_rate {
        cfg.task.noise_rate = r;
    }
    if let Some(l) = a.lambda {
        cfg.vmr.lambda_vos = l;
    }
    if let Some(e) = a.epochs {
        cfg.vmr.epochs = e;
    }
    if let Some(w) = a.warmup_epochs {
        cfg.vmr.warmup_epochs = w;
    }
    create_dir(&a.out)?;
    let report = vmr_experiment_with_outputs(&cfg.task, &cfg.vmr, &cfg.seeds, Some(&a.out))?;
    write_json(&report, a.out.join("report.json"))?;
    let rows = report.metric_rows();
    if rows.is_empty() {
        eprintln!("no seed completed");
        for s in &report.seeds {
            eprintln!("seed {}: {}", s.seed, s.error.as_deref().unwrap_or("unknown error"));
        }
        return Ok(Status::DataError);
    }
    write_rows_csv(&rows, a.out.join("metrics.csv"))?;
    let tables = a.out.join("tables");
    create_dir(&tables)?;
    let md = render_table(&rows, Layout::Paired, TableFormat::Markdown)?;
    emit(&md, Some(&tables.join("paired.md")))?;
    write_run_meta(&a.out)?;
    outln!(
        "seeds {}/{}: mean Δfar-AUROC {:+.2}, mean Δnear-AUROC {:+.2}, mean Δacc {:+.2}, ID-wrong improved {}/{}",
        report.n_completed,
        report.seeds.len(),
        report.mean_delta_far_auroc,
        report.mean_delta_near_auroc,
        report.mean_delta_acc,
        report.id_wrong_improved,
        report.n_completed
    );
    Ok(if report.n_completed < report.seeds.len() { Status::Partial } else { Status::Ok })
}

fn run_compare(a: CompareArgs) -> Result<Status> {
    let ra = read_rows(&a.a)?;
    let rb = read_rows(&a.b)?;
    let cmp = cmd_compare(&ra, &rb)?;
    if let Some(p) = &a.out {
        write_json(&cmp, p)?;
    }
    out!("{}", cmp.to_markdown());
    Ok(Status::Ok)
}

fn run_render(a: RenderArgs) -> Result<Status> {
    let text = match a.layout {
        Layout::Taxonomy => {
            if a.format != TableFormat::Markdown {
                return Err(AuditError::InvalidArgument("taxonomy layout renders markdown only".into()));
            }
            let mut cols = Vec::new();
            for item in &a.inputs {
                let (label, path) = item.split_once('=').unwrap_or((item.as_str(), item.as_str()));
                let text = fs::read_to_string(path).map_err(|e| AuditError::Io {
                    path: path.into(),
                    source: e,
                })?;
                let rep: TaxonomyReport = serde_json::from_str(&text)?;
                cols.push((label.to_string(), rep));
            }
            render_taxonomy(&cols)?
        }
        Layout::Paired if a.format == TableFormat::Markdown => {
            let rows = read_many(&a.inputs)?;
            let (b, r, paired) = ood_audit::report::paired_rows(&rows)?;
            render_paired(&b, &r, &paired)?
        }
        layout => render_table(&read_many(&a.inputs)?, layout, a.format)?,
    };
    emit(&text, a.out.as_deref())?;
    Ok(Status::Ok)
}

fn read_many(inputs: &[String]) -> Result<Vec<ood_audit::metrics::MetricRow>> {
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(read_rows(p)?);
    }
    Ok(rows)
}

fn run_validate(a: ValidateArgs) -> Result<Status> {
    let mut status = Status::Ok;
    for p in &a.dumps {
        let report = match load_dump(p) {
            Ok(d) => validate_dump(&d),
            Err(e) => {
                outln!("{}: FAIL {e}", p.display());
                status = Status::DataError;
                continue;
            }
        };
        let verdict = if report.ok { "ok" } else { "FAIL" };
        outln!("{}: {verdict}", p.display());
        for v in &report.violations {
            outln!("  {:?} {}: {}", v.severity, v.location, v.message);
        }
        if !report.ok {
            status = Status::DataError;
        }
    }
    Ok(status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Eval(a) => run_eval(a),
        Cmd::Score(a) => run_score(a),
        Cmd::Taxonomy(a) => run_taxonomy(a),
        Cmd::Geometry(a) => run_geometry(a),
        Cmd::VmrDemo(a) => run_vmr(a),
        Cmd::Compare(a) => run_compare(a),
        Cmd::Render(a) => run_render(a),
        Cmd::Validate(a) => run_validate(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(EXIT_PARTIAL),
        Ok(Status::DataError) => ExitCode::from(EXIT_DATA),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AuditError::InvalidArgument(_) => ExitCode::from(EXIT_INVALID),
                _ => ExitCode::from(EXIT_DATA),
            }
        }
    }
}
