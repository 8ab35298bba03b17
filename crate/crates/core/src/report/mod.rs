//! Reporting: evaluation plans, metric tables, and report comparison.

mod compare;
mod eval;
mod plan;
mod render;
mod rows;

pub use compare::{cmd_compare, Comparison, DeltaStatus, MetricDelta, RowComparison, COMPARED_METRICS};
pub use eval::{cmd_eval, write_eval_outputs, write_run_meta, EvalOutcome, RunSummary, Skipped};
pub use plan::{RunPlan, DEFAULT_OUT, OUT_ENV};
pub use render::{
    benchmark_table, column_marks, fmt_signed, paired_rows, render_benchmark, render_paired, render_table,
    render_taxonomy, BenchMetric, BenchmarkLine, BenchmarkTable, Cell, Layout, Mark, PairedRow, TableFormat,
};
pub use rows::{read_rows, rows_from_csv, rows_to_csv, write_json, write_rows_csv, write_rows_json, METRIC_COLUMNS};
