use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use salfuse_cli::{cmd_evaluate, cmd_predict, cmd_train_forest, cmd_train_fusion, ingest, CliError, PipelineConfig};

/// Multi-scale saliency detection with dictionary-learned fusion.
#[derive(Debug, Parser)]
#[command(name = "salfuse", version)]
struct Cli {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured patch stride.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Also write intermediate artifacts (per-scale maps, training matrices).
    #[arg(long, global = true)]
    dump_intermediate: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validates a dataset directory with images/ and masks/ subdirectories.
    IngestCheck { dir: PathBuf },
    /// Trains the region regressor.
    TrainForest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the fusion model on forest maps.
    TrainFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes fused saliency maps for an image or a directory of images.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        fusion: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweeps thresholds over predicted maps against dataset masks.
    Evaluate {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output prefix for `<prefix>_curve.csv` and `<prefix>_summary.json`.
        #[arg(long)]
        out: PathBuf,
        /// Evaluates `<stem><suffix>.png` maps, e.g. `_scale1`.
        #[arg(long, default_value = "")]
        suffix: String,
    },
    /// Prints the effective configuration.
    PrintConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(stride) = cli.stride {
        cfg.stride = stride;
    }
    cfg.validate()?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }

    match cli.command {
        Command::IngestCheck { dir } => {
            let (manifest, report) = ingest(&dir)?;
            println!("{}: {} usable pairs", manifest.name, manifest.entries.len());
            for line in report.lines() {
                println!("  {line}");
            }
        }
        Command::TrainForest { data, out } => {
            let (manifest, _) = ingest(&data)?;
            let model = cmd_train_forest(&manifest, &cfg, &out)?;
            println!("wrote {} ({} trees)", out.display(), model.tree_count());
        }
        Command::TrainFusion { data, forest, out } => {
            let (manifest, _) = ingest(&data)?;
            let dump = cli.dump_intermediate.then(|| out.with_extension("dump"));
            let model = cmd_train_fusion(&manifest, &forest, &cfg, &out, dump.as_deref())?;
            println!(
                "wrote {} ({} modalities, {} atoms)",
                out.display(),
                model.modalities(),
                model.atom_count()
            );
        }
        Command::Predict {
            input,
            forest,
            fusion,
            out,
        } => {
            let report = cmd_predict(&input, &forest, &fusion, &out, &cfg, cli.dump_intermediate)?;
            println!("wrote {} maps to {}", report.written.len(), out.display());
            if !report.failed.is_empty() {
                println!("{} inputs failed", report.failed.len());
            }
        }
        Command::Evaluate {
            maps,
            data,
            out,
            suffix,
        } => {
            let (manifest, _) = ingest(&data)?;
            let curve = cmd_evaluate(&maps, &manifest, &out, &cfg, &suffix)?;
            println!("max_f {:.4} auc_roc {:.4}", curve.max_f, curve.auc_roc);
        }
        Command::PrintConfig => print!("{}", cfg.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SALFUSE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("salfuse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
