use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ecgseg::experiments::{cmd_benchmark, cmd_evaluate, cmd_prepare, cmd_report, layered, plan, run_plan, EvaluateRequest};
use ecgseg::ingest::adapters::{adapter_names, AdapterOptions};
use ecgseg::ingest::Split;
use ecgseg::synth::synth_corpus;
use ecgseg::{Algorithm, Backbone, CorpusSpec, ExperimentSpec, LabelRatio, SynthConfig};

#[derive(Parser)]
#[command(name = "ecgseg", version, about = "Semi-supervised ECG delineation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Layers {
    /// TOML file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw public corpus into the canonical on-disk format.
    Prepare {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(adapter_names()))]
        adapter: String,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the subject split and label subsets.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        layers: Layers,
    },
    /// Generate a synthetic annotated corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        layers: Layers,
    },
    /// Train and evaluate a single sweep cell.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        backbone: Option<Backbone>,
        #[arg(long)]
        ratio: Option<LabelRatio>,
        #[command(flatten)]
        layers: Layers,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Fail when the checkpoint holds another backbone.
        #[arg(long)]
        backbone: Option<Backbone>,
        #[arg(long)]
        out: PathBuf,
        /// Experiment spec supplying preprocessing and the mIoU class set.
        #[command(flatten)]
        layers: Layers,
    },
    /// Run a full sweep, skipping cells that already finished.
    Benchmark {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds replacing the configured ones.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        layers: Layers,
    },
    /// Aggregate finished runs into CSV and Markdown tables.
    Report {
        /// Sweep or run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_spec(layers: &Layers) -> anyhow::Result<ExperimentSpec> {
    Ok(layered(&ExperimentSpec::default(), layers.config.as_deref(), &layers.overrides)?)
}

fn finish_spec(mut spec: ExperimentSpec, out: Option<&Path>, seeds: Vec<u64>) -> anyhow::Result<ExperimentSpec> {
    if let Some(out) = out {
        spec.out_dir = out.to_path_buf();
    }
    if !seeds.is_empty() {
        spec.seeds = seeds;
    }
    spec.validate()?;
    Ok(spec)
}

fn parse_split(s: &str) -> anyhow::Result<Option<Split>> {
    Ok(match s {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        "all" => None,
        other => return Err(ecgseg::Error::Validation(format!("unknown split `{other}` (train, val, test, all)")).into()),
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare {
            adapter,
            raw,
            out,
            seed,
            layers,
        } => {
            let mut options: AdapterOptions = layered(&AdapterOptions::default(), layers.config.as_deref(), &layers.overrides)?;
            if let Some(seed) = seed {
                options.split_seed = seed;
            }
            let handle = cmd_prepare(&adapter, &raw, &out, &options)
                .with_context(|| format!("converting {} with the {adapter} adapter", raw.display()))?;
            println!("prepared {} examples into {}", handle.len(), out.display());
        }
        Command::Synth { out, seed, layers } => {
            let defaults = CorpusSpec::new(SynthConfig::default(), 16, 4);
            let mut spec: CorpusSpec = layered(&defaults, layers.config.as_deref(), &layers.overrides)?;
            if let Some(seed) = seed {
                spec.template.seed = seed;
                spec.split_seed = seed;
            }
            let manifest = synth_corpus(&spec, &out)?;
            println!(
                "wrote {} records of `{}` to {}",
                spec.n_subjects * spec.per_subject,
                spec.dataset_id,
                manifest.display()
            );
        }
        Command::Train {
            out,
            seed,
            algorithm,
            backbone,
            ratio,
            layers,
        } => {
            let mut spec = load_spec(&layers)?;
            if let Some(a) = algorithm {
                spec.algorithms = vec![a];
            }
            if let Some(b) = backbone {
                spec.backbones = vec![b];
            }
            if let Some(r) = ratio {
                spec.ratios = vec![r];
            }
            let spec = finish_spec(spec, out.as_deref(), seed.into_iter().collect())?;
            let plan = plan(&spec)?;
            if plan.cells.len() != 1 {
                return Err(ecgseg::Error::Validation(format!(
                    "train runs exactly one cell but the configuration yields {}; narrow it or use `benchmark`",
                    plan.cells.len()
                ))
                .into());
            }
            let outcome = run_plan(&plan)?;
            for r in &outcome.runs {
                let state = if r.skipped { "already complete" } else { "trained" };
                println!("{state}: {}", r.dir.display());
                for row in &r.rows {
                    println!("  {} mIoU {:.4} MAE avg {:?}", row.dataset, row.miou.unwrap_or(f64::NAN), row.mae_avg);
                }
            }
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
            backbone,
            out,
            layers,
        } => {
            let spec = load_spec(&layers)?;
            spec.preprocess.validate()?;
            let report = cmd_evaluate(&EvaluateRequest {
                checkpoint: &checkpoint,
                dataset: &dataset,
                split: parse_split(&split)?,
                preprocess: spec.preprocess,
                classes: spec.eval_classes,
                expected_backbone: backbone,
                out_dir: &out,
            })?;
            match report.miou {
                Some(m) => println!("mIoU {:.4} over {} records", m, report.n_records),
                None => println!("{} interval-only records", report.n_records),
            }
            println!("MAE avg {:?} ms", report.mae_ms.avg);
        }
        Command::Benchmark { out, seeds, layers } => {
            let spec = finish_spec(load_spec(&layers)?, out.as_deref(), seeds)?;
            let outcome = cmd_benchmark(&spec)?;
            println!(
                "{} cells: {} trained, {} already complete; tables in {}",
                outcome.runs.len(),
                outcome.trained(),
                outcome.skipped(),
                spec.out_dir.display()
            );
        }
        Command::Report { runs, out } => {
            let output = cmd_report(&runs, &out)?;
            if output.rows.is_empty() {
                bail!("no rows collected");
            }
            println!("{}", output.markdown);
            for (dir, why) in &output.skipped {
                eprintln!("skipped {}: {why}", dir.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ecgseg::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
