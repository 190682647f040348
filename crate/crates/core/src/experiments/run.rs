use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::{canonical_hash, read_json, write_json};
use super::spec::{ExperimentSpec, Protocol};
use super::tables::{cmd_report, ReportOutput};
use crate::augment::AugmentPolicy;
use crate::dsp::{prepare, PreparedExample, PreprocessConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_rows, write_rows, EvalOptions, MetricsReport, MetricsRow, MiouClasses};
use crate::ingest::adapters::{convert, AdapterOptions};
use crate::ingest::{load_dataset, merge_datasets, DatasetHandle, LabelRatio, Split};
use crate::models::{checkpoint_config, Backbone, ModelConfig, SegModel};
use crate::trainers::{train_with, Algorithm, EpochRecord, TrainConfig, TrainData, TrainSetup};

pub const RUN_MANIFEST: &str = "run.json";
pub const ROWS_FILE: &str = "rows.csv";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const RUNS_DIR: &str = "runs";
/// Ratio tag of runs that use every training label.
pub const FULL_RATIO: &str = "full";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    Weak,
    Strong,
}

/// Identity of one training run inside a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub protocol: Protocol,
    /// Dataset id of the labeled data (`a+b` for merged sets).
    pub dataset: String,
    pub ratio: Option<LabelRatio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<Panel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub algorithm: Algorithm,
    pub backbone: Backbone,
    pub seed: u64,
}

impl Cell {
    pub fn ratio_tag(&self) -> &'static str {
        self.ratio.map(LabelRatio::tag).unwrap_or(FULL_RATIO)
    }

    /// Directory name: readable and unique within a sweep.
    pub fn id(&self) -> String {
        let mut parts = vec![self.dataset.clone(), self.ratio_tag().replace('/', "-")];
        if let Some(v) = &self.variant {
            parts.push(v.replace('+', "_"));
        }
        parts.push(self.algorithm.name().into());
        parts.push(self.backbone.name().into());
        parts.push(format!("s{}", self.seed));
        parts
            .join("__")
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect()
    }
}

/// Where a cell's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSources {
    pub labeled: Vec<PathBuf>,
    /// `None` uses the labeled data's own training split as the pool.
    pub unlabeled: Option<PathBuf>,
    pub interval_only: Vec<PathBuf>,
}

/// Everything that determines a cell's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub cell: Cell,
    pub data: DataSources,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub preprocess: PreprocessConfig,
    pub eval_classes: MiouClasses,
    pub code_version: String,
}

impl CellConfig {
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec_hash: String,
    pub cell_hash: String,
    pub cell: Cell,
    pub seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub best_val_miou: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Relative to the run directory.
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn is_complete(&self) -> bool {
        self.finished_at.is_some()
    }
}

pub struct Plan {
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    pub cells: Vec<CellConfig>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn load_checked(path: &Path, needs_split: bool) -> Result<DatasetHandle> {
    let handle = load_dataset(path)
        .map_err(|e| Error::Validation(format!("dataset {} is not prepared: {e}", path.display())))?;
    if needs_split && handle.split().is_none() {
        return Err(Error::Validation(format!("dataset {} has no subject split", path.display())));
    }
    Ok(handle)
}

fn label(handle: &DatasetHandle) -> String {
    handle.dataset_ids().collect::<Vec<_>>().join("+")
}

/// Expands a spec into its cells. Every referenced dataset is opened here so
/// that a missing one fails before any training starts.
pub fn plan(spec: &ExperimentSpec) -> Result<Plan> {
    spec.validate()?;
    let code_version = env!("CARGO_PKG_VERSION").to_string();
    let mut cells = Vec::new();
    let mut push = |cell: Cell, data: DataSources, augment: AugmentPolicy| {
        cells.push(CellConfig {
            train: TrainConfig {
                algorithm: cell.algorithm,
                seed: cell.seed,
                ..spec.train.clone()
            },
            model: ModelConfig {
                backbone: cell.backbone,
                ..spec.model.clone()
            },
            cell,
            data,
            augment,
            preprocess: spec.preprocess,
            eval_classes: spec.eval_classes,
            code_version: code_version.clone(),
        });
    };
    for path in &spec.interval_only_datasets {
        load_checked(path, false)?;
    }
    match spec.protocol {
        Protocol::InDomain => {
            for path in &spec.datasets {
                let dataset = label(&load_checked(path, true)?);
                let data = DataSources {
                    labeled: vec![path.clone()],
                    unlabeled: None,
                    interval_only: Vec::new(),
                };
                for &ratio in &spec.ratios {
                    for &backbone in &spec.backbones {
                        for &algorithm in &spec.algorithms {
                            for &seed in &spec.seeds {
                                let cell = Cell {
                                    protocol: spec.protocol,
                                    dataset: dataset.clone(),
                                    ratio: Some(ratio),
                                    panel: None,
                                    variant: None,
                                    algorithm,
                                    backbone,
                                    seed,
                                };
                                push(cell, data.clone(), spec.augment.clone());
                            }
                        }
                    }
                }
            }
        }
        Protocol::CrossDomain => {
            let handles = spec
                .datasets
                .iter()
                .map(|p| load_checked(p, true))
                .collect::<Result<Vec<_>>>()?;
            let dataset = label(&merge_datasets(&handles)?);
            let unlabeled = spec.unlabeled_dataset.clone().expect("validated");
            load_checked(&unlabeled, false)?;
            let data = DataSources {
                labeled: spec.datasets.clone(),
                unlabeled: Some(unlabeled),
                interval_only: spec.interval_only_datasets.clone(),
            };
            let ratios: Vec<Option<LabelRatio>> = if spec.ratios.is_empty() {
                vec![None]
            } else {
                spec.ratios.iter().copied().map(Some).collect()
            };
            for ratio in ratios {
                for &backbone in &spec.backbones {
                    for &algorithm in &spec.algorithms {
                        for &seed in &spec.seeds {
                            let cell = Cell {
                                protocol: spec.protocol,
                                dataset: dataset.clone(),
                                ratio,
                                panel: None,
                                variant: None,
                                algorithm,
                                backbone,
                                seed,
                            };
                            push(cell, data.clone(), spec.augment.clone());
                        }
                    }
                }
            }
        }
        Protocol::AugAblation => {
            let path = &spec.datasets[0];
            let dataset = label(&load_checked(path, true)?);
            let data = DataSources {
                labeled: vec![path.clone()],
                unlabeled: None,
                interval_only: Vec::new(),
            };
            let ratio = Some(spec.ratios.first().copied().unwrap_or(LabelRatio::Sixteenth));
            let mut arms: Vec<(Panel, String, Algorithm, AugmentPolicy)> = Vec::new();
            for v in spec.ablation.weak_variants()? {
                arms.push((Panel::Weak, v.name().to_string(), Algorithm::Scratch, v.policy(&spec.augment)));
            }
            for v in spec.ablation.strong_variants()? {
                arms.push((Panel::Strong, v.name(), Algorithm::Fixmatch, v.policy(&spec.augment)));
            }
            for &backbone in &spec.backbones {
                for (panel, variant, algorithm, policy) in &arms {
                    for &seed in &spec.seeds {
                        let cell = Cell {
                            protocol: spec.protocol,
                            dataset: dataset.clone(),
                            ratio,
                            panel: Some(*panel),
                            variant: Some(variant.clone()),
                            algorithm: *algorithm,
                            backbone,
                            seed,
                        };
                        push(cell, data.clone(), policy.clone());
                    }
                }
            }
        }
    }
    Ok(Plan {
        spec: spec.clone(),
        spec_hash: spec.hash()?,
        cells,
    })
}

/// A dataset with every entry run through the preprocessing chain.
pub struct PreparedDataset {
    pub handle: DatasetHandle,
    pub examples: Vec<PreparedExample>,
}

impl PreparedDataset {
    pub fn new(handle: DatasetHandle, config: &PreprocessConfig) -> Result<Self> {
        let examples = handle
            .iter()
            .map(|ex| prepare(&ex?, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { handle, examples })
    }

    pub fn pick(&self, indices: &[usize]) -> Vec<PreparedExample> {
        indices.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn split(&self, split: Split) -> Vec<PreparedExample> {
        self.pick(&self.handle.indices(split))
    }
}

/// Prepared data keyed by source paths, so sweeps preprocess each set once.
#[derive(Default)]
pub struct DataCache {
    prepared: BTreeMap<(Vec<PathBuf>, String), PreparedDataset>,
}

impl DataCache {
    pub fn get(&mut self, paths: &[PathBuf], config: &PreprocessConfig) -> Result<&PreparedDataset> {
        let key = (paths.to_vec(), canonical_hash(config)?);
        if !self.prepared.contains_key(&key) {
            let handles = paths
                .iter()
                .map(|p| load_checked(p, false))
                .collect::<Result<Vec<_>>>()?;
            let handle = if handles.len() == 1 {
                handles.into_iter().next().expect("one handle")
            } else {
                merge_datasets(&handles)?
            };
            self.prepared.insert(key.clone(), PreparedDataset::new(handle, config)?);
        }
        Ok(&self.prepared[&key])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRun {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// A complete run with the same cell hash was found; nothing was trained.
    pub skipped: bool,
}

fn completed(dir: &Path, cell_hash: &str) -> Option<Vec<MetricsRow>> {
    let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST)).ok()?;
    if !manifest.is_complete() || manifest.cell_hash != cell_hash {
        return None;
    }
    read_rows(&dir.join(ROWS_FILE)).ok()
}

fn row(cell: &Cell, dataset: &str, report: &MetricsReport) -> MetricsRow {
    MetricsRow::new(
        dataset,
        cell.algorithm.name(),
        cell.backbone.name(),
        cell.ratio_tag(),
        cell.seed,
        report,
    )
}

/// Trains and evaluates one cell in `out_dir/runs/<cell id>`, or returns the
/// stored rows when an identical run already completed there.
pub fn run_cell(config: &CellConfig, spec_hash: &str, out_dir: &Path, cache: &mut DataCache) -> Result<CellRun> {
    let cell = &config.cell;
    let dir = out_dir.join(RUNS_DIR).join(cell.id());
    let cell_hash = config.hash()?;
    if let Some(rows) = completed(&dir, &cell_hash) {
        log::info!("{}: complete, skipping", cell.id());
        return Ok(CellRun { dir, rows, skipped: true });
    }
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    write_json(&dir.join("config.json"), config)?;
    let mut manifest = RunManifest {
        spec_hash: spec_hash.to_string(),
        cell_hash,
        cell: cell.clone(),
        seed: cell.seed,
        code_version: config.code_version.clone(),
        started_at: now(),
        finished_at: None,
        best_val_miou: None,
        best_epoch: None,
        checkpoints: Vec::new(),
    };
    write_json(&dir.join(RUN_MANIFEST), &manifest)?;

    let labeled_set = cache.get(&config.data.labeled, &config.preprocess)?;
    let labeled = labeled_set.pick(&labeled_set.handle.labeled_indices(cell.ratio)?);
    let val = labeled_set.split(Split::Val);
    let test = labeled_set.split(Split::Test);
    let pool_own = labeled_set.split(Split::Train);
    let pool = match &config.data.unlabeled {
        Some(path) => cache.get(std::slice::from_ref(path), &config.preprocess)?.examples.clone(),
        None => pool_own,
    };

    let setup = TrainSetup {
        model: config.model.clone(),
        train: config.train.clone(),
        augment: config.augment.clone(),
        fs: config.preprocess.target_fs_hz,
        dtype: DType::F32,
    };
    let log_path = dir.join(METRICS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(Error::io(&log_path))?);
    let mut log_error = None;
    let mut observer = |phase: usize, record: &EpochRecord| {
        #[derive(Serialize)]
        struct Line<'a> {
            phase: usize,
            #[serde(flatten)]
            record: &'a EpochRecord,
        }
        let line = serde_json::to_string(&Line { phase, record }).expect("epoch records serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
        log::info!("{} phase {phase} epoch {}: val mIoU {:.4}", cell.id(), record.epoch, record.val_miou);
    };
    let data = TrainData {
        labeled: &labeled,
        unlabeled: &pool,
        val: &val,
    };
    let outcome = train_with(&setup, data, &mut observer)?;
    log.flush().map_err(Error::io(&log_path))?;
    if let Some(e) = log_error {
        return Err(Error::Io { path: log_path, source: e });
    }
    drop(log);

    outcome.best.save(&dir.join(BEST_CKPT), outcome.history.best_epoch as u64)?;
    outcome.last.save(&dir.join(LAST_CKPT), outcome.history.epochs.len() as u64)?;
    write_json(&dir.join("history.json"), &outcome.history)?;

    let options = EvalOptions {
        classes: config.eval_classes,
        ..EvalOptions::default()
    };
    let fs_hz = config.preprocess.target_fs_hz;
    let report = evaluate(&outcome.best, &test, fs_hz, options)?;
    write_json(&dir.join("report_test.json"), &report)?;
    let mut rows = vec![row(cell, &cell.dataset, &report)];
    for path in &config.data.interval_only {
        let set = cache.get(std::slice::from_ref(path), &config.preprocess)?;
        let name = label(&set.handle);
        let report = evaluate(&outcome.best, &set.examples, fs_hz, options)?;
        write_json(&dir.join(format!("report_{name}.json")), &report)?;
        rows.push(row(cell, &name, &report));
    }
    write_rows(&dir.join(ROWS_FILE), &rows)?;

    manifest.finished_at = Some(now());
    manifest.best_val_miou = Some(outcome.history.best_val_miou);
    manifest.best_epoch = Some(outcome.history.best_epoch);
    manifest.checkpoints = vec![BEST_CKPT.into(), LAST_CKPT.into()];
    write_json(&dir.join(RUN_MANIFEST), &manifest)?;
    Ok(CellRun {
        dir,
        rows,
        skipped: false,
    })
}

pub struct SweepOutcome {
    pub runs: Vec<CellRun>,
    pub report: ReportOutput,
}

impl SweepOutcome {
    pub fn trained(&self) -> usize {
        self.runs.iter().filter(|r| !r.skipped).count()
    }

    pub fn skipped(&self) -> usize {
        self.runs.iter().filter(|r| r.skipped).count()
    }
}

/// Runs every cell of the plan, then writes the spec snapshot, the combined
/// CSV and the Markdown tables into the sweep's output directory.
pub fn run_plan(plan: &Plan) -> Result<SweepOutcome> {
    let out = &plan.spec.out_dir;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    write_json(&out.join("spec.json"), &plan.spec)?;
    let mut cache = DataCache::default();
    let mut runs = Vec::with_capacity(plan.cells.len());
    for (i, cell) in plan.cells.iter().enumerate() {
        log::info!("[{}/{}] {}", i + 1, plan.cells.len(), cell.cell.id());
        runs.push(run_cell(cell, &plan.spec_hash, out, &mut cache)?);
    }
    let dirs: Vec<PathBuf> = runs.iter().map(|r| r.dir.clone()).collect();
    let report = cmd_report(&dirs, out)?;
    Ok(SweepOutcome { runs, report })
}

fn expect_protocol(spec: &ExperimentSpec, protocol: Protocol) -> Result<()> {
    if spec.protocol != protocol {
        return Err(Error::Config(format!(
            "spec protocol is {}, expected {protocol}",
            spec.protocol
        )));
    }
    Ok(())
}

pub fn cmd_run_in_domain(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    expect_protocol(spec, Protocol::InDomain)?;
    run_plan(&plan(spec)?)
}

pub fn cmd_run_cross_domain(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    expect_protocol(spec, Protocol::CrossDomain)?;
    run_plan(&plan(spec)?)
}

pub fn cmd_run_aug_ablation(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    expect_protocol(spec, Protocol::AugAblation)?;
    run_plan(&plan(spec)?)
}

/// Runs whichever protocol the spec declares.
pub fn cmd_benchmark(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    run_plan(&plan(spec)?)
}

/// Converts a raw corpus and reopens the result to confirm it loads.
pub fn cmd_prepare(adapter: &str, raw_dir: &Path, out_dir: &Path, options: &AdapterOptions) -> Result<DatasetHandle> {
    let manifest = convert(adapter, raw_dir, out_dir, options)?;
    load_dataset(manifest)
}

pub struct EvaluateRequest<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    /// `None` scores every record.
    pub split: Option<Split>,
    pub preprocess: PreprocessConfig,
    pub classes: MiouClasses,
    /// Fails when the checkpoint was trained with another backbone.
    pub expected_backbone: Option<Backbone>,
    pub out_dir: &'a Path,
}

/// Scores a checkpoint on a dataset and writes `report.json` and `rows.csv`.
/// Run identity columns come from a `run.json` next to the checkpoint when
/// there is one.
pub fn cmd_evaluate(req: &EvaluateRequest<'_>) -> Result<MetricsReport> {
    let stored = checkpoint_config(req.checkpoint)?;
    if let Some(expected) = req.expected_backbone {
        if stored.backbone != expected {
            return Err(Error::Validation(format!(
                "checkpoint backbone {} does not match configured backbone {}",
                stored.backbone.name(),
                expected.name()
            )));
        }
    }
    let (model, _) = SegModel::load(req.checkpoint)?;
    let handle = load_checked(req.dataset, req.split.is_some())?;
    let set = PreparedDataset::new(handle, &req.preprocess)?;
    let samples = match req.split {
        Some(s) => set.split(s),
        None => set.examples.clone(),
    };
    if samples.is_empty() {
        return Err(Error::Validation(format!("{} has no records to evaluate", req.dataset.display())));
    }
    let options = EvalOptions {
        classes: req.classes,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &samples, req.preprocess.target_fs_hz, options)?;
    fs::create_dir_all(req.out_dir).map_err(Error::io(req.out_dir))?;
    write_json(&req.out_dir.join("report.json"), &report)?;
    let manifest: Option<RunManifest> = req
        .checkpoint
        .parent()
        .and_then(|d| read_json(&d.join(RUN_MANIFEST)).ok());
    let dataset = label(&set.handle);
    let row = match manifest {
        Some(m) => self::row(&m.cell, &dataset, &report),
        None => MetricsRow::new(&dataset, "checkpoint", stored.backbone.name(), FULL_RATIO, 0, &report),
    };
    write_rows(&req.out_dir.join(ROWS_FILE), &[row])?;
    Ok(report)
}
