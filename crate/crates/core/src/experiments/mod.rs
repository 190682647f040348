//! Sweep orchestration: experiment specs, idempotent run directories, the
//! in-domain, cross-domain and augmentation-ablation protocols, standalone
//! evaluation and Markdown result tables.

mod config;
mod run;
mod spec;
mod tables;

pub use config::{apply_override, canonical_hash, layered, merge, parse_override};
pub use run::{
    cmd_benchmark, cmd_evaluate, cmd_prepare, cmd_run_aug_ablation, cmd_run_cross_domain, cmd_run_in_domain, plan,
    run_cell, run_plan, Cell, CellConfig, CellRun, DataCache, DataSources, EvaluateRequest, Panel, Plan,
    PreparedDataset, RunManifest, SweepOutcome, BEST_CKPT, FULL_RATIO, LAST_CKPT, METRICS_LOG, ROWS_FILE, RUNS_DIR,
    RUN_MANIFEST,
};
pub use spec::{AblationSpec, ExperimentSpec, Protocol, StrongVariant, WeakVariant};
pub use tables::{
    ablation_report, backbone_title, cmd_report, collect_runs, cross_domain_table, discover_runs, in_domain_table,
    interval_only_table, method_title, render_tables, Better, Metric, ReportOutput, RunSummary, Stat,
};
