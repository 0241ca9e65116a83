//! `mga`: data generation, training, gradient verification, indexing,
//! search, and evaluation for the multi-granular alignment retriever.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mga_core::data::mgaf::{read_feature_file, records_digest, write_feature_file};
use mga_core::data::synth::generate_synthetic;
use mga_core::data::types::Split;
use mga_core::retrieval::{
    build_index, evaluate, read_index_file, search, write_index_file,
};
use mga_core::rng::stream;
use mga_core::trainer::gradcheck::grad_check;
use mga_core::trainer::{read_checkpoint, write_checkpoint, Trainer};
use mga_core::{
    ImageRecord, MgaError, ModelParams, Reduction, SynthSpec, TrainConfig,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mga", version, about = "Multi-granular alignment retrieval pipeline")]
struct Cli {
    /// Worker thread cap for retrieval fan-out (default: MGA_THREADS env
    /// var, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Max,
    Mean,
}

impl From<ModeArg> for Reduction {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Max => Reduction::Max,
            ModeArg::Mean => Reduction::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Query,
    Gallery,
    All,
}

impl SplitArg {
    fn filter(self, records: Vec<ImageRecord<f32>>) -> Vec<ImageRecord<f32>> {
        let keep = match self {
            SplitArg::Train => Split::Train,
            SplitArg::Query => Split::Query,
            SplitArg::Gallery => Split::Gallery,
            SplitArg::All => return records,
        };
        records.into_iter().filter(|r| r.split == keep).collect()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature file.
    Gen {
        /// Generator spec as JSON; omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        images_per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output feature file (MGAF).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a feature file.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config as JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for config, metrics, and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences on a small
    /// synthetic problem.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Token-similarity reduction to check.
        #[arg(long, value_enum, default_value_t = ModeArg::Mean)]
        mode: ModeArg,
        /// Coordinates probed per parameter group.
        #[arg(long, default_value_t = 6)]
        coords: usize,
    },
    /// Build a gallery index from a feature file and checkpoint.
    Index {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split of --data to index.
        #[arg(long, value_enum, default_value_t = SplitArg::Gallery)]
        split: SplitArg,
        /// Output index file (MGAI).
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank gallery images for each query; one JSON line per query.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query_data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Query)]
        split: SplitArg,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        shortlist: usize,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Max)]
        reduction: ModeArg,
    },
    /// Evaluate retrieval quality; prints an R@K / mAP report as JSON.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query_data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Query)]
        split: SplitArg,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        shortlist: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Max)]
        reduction: ModeArg,
    },
}

enum CliError {
    Data(String),
    Verification(String),
}

impl From<MgaError> for CliError {
    fn from(e: MgaError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("MGA_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // a second invocation in-process would fail; the cap is best-effort
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
        Err(CliError::Verification(msg)) => {
            eprintln!("verification failed: {}", msg);
            ExitCode::from(3)
        }
    }
}

fn load_json<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn write_run_config(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    fs::write(path, format!("{:#}\n", value))?;
    Ok(())
}

/// Sidecar path recording the exact configuration of a run that produced
/// `out`: `<out>.run.json`.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen {
            spec,
            classes,
            images_per_class,
            seed,
            out,
        } => cmd_gen(spec, classes, images_per_class, seed, out),
        Command::Train {
            data,
            config,
            out,
            resume,
        } => cmd_train(data, config, out, resume),
        Command::Gradcheck {
            config,
            mode,
            coords,
        } => cmd_gradcheck(config, mode.into(), coords),
        Command::Index {
            data,
            checkpoint,
            split,
            out,
        } => cmd_index(data, checkpoint, split, out),
        Command::Search {
            index,
            query_data,
            checkpoint,
            split,
            alpha,
            shortlist,
            topk,
            reduction,
        } => cmd_search(
            index,
            query_data,
            checkpoint,
            split,
            alpha,
            shortlist,
            topk,
            reduction.into(),
        ),
        Command::Eval {
            index,
            query_data,
            checkpoint,
            split,
            alpha,
            shortlist,
            reduction,
        } => cmd_eval(
            index,
            query_data,
            checkpoint,
            split,
            alpha,
            shortlist,
            reduction.into(),
        ),
    }
}

fn cmd_gen(
    spec_path: Option<PathBuf>,
    classes: Option<usize>,
    images_per_class: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<(), CliError> {
    let mut spec: SynthSpec = load_json(spec_path.as_deref())?;
    if let Some(c) = classes {
        spec.num_classes = c;
    }
    if let Some(i) = images_per_class {
        spec.images_per_class = i;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let records = generate_synthetic(&spec)?;
    write_feature_file(&records, &out)?;
    write_run_config(
        &sidecar(&out),
        &serde_json::json!({ "command": "gen", "spec": spec }),
    )?;
    println!(
        "wrote {} records ({} classes) to {} [sha256 {}]",
        records.len(),
        spec.num_classes,
        out.display(),
        records_digest(&records)?
    );
    Ok(())
}

fn cmd_train(
    data: PathBuf,
    config_path: Option<PathBuf>,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    let config: TrainConfig = load_json(config_path.as_deref())?;
    let records = read_feature_file(&data)?;
    fs::create_dir_all(&out)?;
    fs::write(
        out.join("config.json"),
        format!("{:#}\n", serde_json::to_value(&config)?),
    )?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = read_checkpoint::<f32>(&path)?;
            Trainer::resume(config, records, ckpt)?
        }
        None => Trainer::new(config, records)?,
    };

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    use std::io::Write;
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.run_epoch()?;
        let line = serde_json::to_string(&m)?;
        writeln!(metrics_file, "{}", line)?;
        println!("{}", line);
        let ckpt_path = out.join(format!("checkpoint-{:03}.mgac", trainer.epoch));
        write_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    }
    Ok(())
}

fn cmd_gradcheck(
    config_path: Option<PathBuf>,
    reduction: Reduction,
    coords: usize,
) -> Result<(), CliError> {
    let mut config: TrainConfig = load_json(config_path.as_deref())?;
    config.reduction = reduction;
    config.validate()?;

    // small, 64-bit instance: the fd oracle is the slow part
    let spec = SynthSpec {
        num_classes: 2,
        images_per_class: 2,
        coarse: mga_core::data::synth::LayerShape {
            height: 2,
            width: 2,
            dim: 16,
        },
        fine: mga_core::data::synth::LayerShape {
            height: 3,
            width: 3,
            dim: 16,
        },
        motif_cells: 4,
        seed: config.seed,
        ..SynthSpec::default()
    };
    config.num_clusters = config.num_clusters.min(4);
    let records: Vec<_> = generate_synthetic(&spec)?
        .iter()
        .map(|r| r.to_f64())
        .collect();
    let labels: Vec<usize> = records.iter().map(|r| r.class_id as usize).collect();
    let refs: Vec<&ImageRecord<f64>> = records.iter().collect();

    let model_config = config.model_config(
        records[0].layers[0].dim(),
        records[0].layers[1].dim(),
        spec.num_classes,
    );
    let mut rng = stream(config.seed, "model-init");
    let model = ModelParams::<f64>::init(&model_config, &mut rng)?;

    let report = grad_check(&model, &refs, &labels, &config, coords)?;
    for g in &report.groups {
        println!(
            "{:<24} max_rel_err {:.3e} ({} coords)",
            g.name, g.max_relative_error, g.coords_checked
        );
    }
    println!("overall max_rel_err {:.3e}", report.max_relative_error);
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_relative_error, GRADCHECK_TOLERANCE
        )))
    }
}

fn cmd_index(
    data: PathBuf,
    checkpoint: PathBuf,
    split: SplitArg,
    out: PathBuf,
) -> Result<(), CliError> {
    let records = split.filter(read_feature_file(&data)?);
    let ckpt = read_checkpoint::<f32>(&checkpoint)?;
    let index = build_index(&records, &ckpt.model)?;
    write_index_file(&index, &out)?;
    write_run_config(
        &sidecar(&out),
        &serde_json::json!({
            "command": "index",
            "data": data.display().to_string(),
            "checkpoint": checkpoint.display().to_string(),
            "entries": index.len(),
        }),
    )?;
    println!("indexed {} gallery images to {}", index.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    index_path: PathBuf,
    query_data: PathBuf,
    checkpoint: PathBuf,
    split: SplitArg,
    alpha: f64,
    shortlist: usize,
    topk: usize,
    reduction: Reduction,
) -> Result<(), CliError> {
    let index = read_index_file::<f32>(&index_path)?;
    let queries = split.filter(read_feature_file(&query_data)?);
    let ckpt = read_checkpoint::<f32>(&checkpoint)?;
    for q in &queries {
        let mut list = search(q, &index, &ckpt.model, alpha as f32, shortlist, reduction)?;
        list.entries.truncate(topk);
        println!(
            "{}",
            serde_json::json!({ "query_id": q.image_id, "results": list.entries })
        );
    }
    Ok(())
}

fn cmd_eval(
    index_path: PathBuf,
    query_data: PathBuf,
    checkpoint: PathBuf,
    split: SplitArg,
    alpha: f64,
    shortlist: usize,
    reduction: Reduction,
) -> Result<(), CliError> {
    let index = read_index_file::<f32>(&index_path)?;
    let queries = split.filter(read_feature_file(&query_data)?);
    let ckpt = read_checkpoint::<f32>(&checkpoint)?;
    let (report, excluded) = evaluate(
        &queries,
        &index,
        &ckpt.model,
        alpha as f32,
        shortlist,
        reduction,
    )?;
    if excluded > 0 {
        eprintln!(
            "warning: {} queries excluded (class absent from gallery)",
            excluded
        );
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
