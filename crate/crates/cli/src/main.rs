use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tcav_core::dataset::{write_manifest, LabelEncoding};
use tcav_core::pipeline::{Pipeline, PipelineConfig, Stage};
use tcav_core::superpixel::SlicParams;
use tcav_core::synth::{planted_blobs, PlantedConfig};

/// Concept discovery and TCAV scoring for segmentation models.
#[derive(Debug, Parser)]
#[command(name = "tcav", version)]
struct Cli {
    /// Pipeline configuration (JSON). Relative paths inside it are resolved
    /// against the file's directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for stage artifacts and results.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the manifest and crop every slice to its ROI.
    Prepare,
    /// Fragment crops into superpixel patches.
    Patches,
    /// Compute patch activations and class-example gradients.
    Embed,
    /// Reduce, cluster with elbow selection, and drop outliers.
    Cluster,
    /// Select concepts and fit concept and random CAVs.
    Cavs,
    /// Score concepts per class and test significance.
    Score,
    /// Write results.json, clusters.json, metrics.json and the HTML report.
    Report,
    /// Run every stage.
    All,
    /// Run up to the given stage.
    Run {
        #[arg(long)]
        stage: String,
    },
    /// Write a synthetic planted dataset and a matching config.
    Synth {
        /// Target directory.
        dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        patients: usize,
        #[arg(long, default_value_t = 10)]
        slices: usize,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let mut c = PipelineConfig::load(path)?;
            c.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            c
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn synth(dir: &Path, patients: usize, slices: usize, seed: u64) -> Result<()> {
    let records = planted_blobs(&PlantedConfig {
        n_patients: patients,
        slices_per_patient: slices,
        seed,
        ..PlantedConfig::default()
    })?;
    let manifest = write_manifest(&dir.join("data"), &records, LabelEncoding::default())?;
    let config = PipelineConfig {
        seed,
        manifest: manifest.strip_prefix(dir).unwrap_or(&manifest).to_path_buf(),
        input_size: 64,
        slic: SlicParams { n_segments: 1, resolutions: vec![1], ..SlicParams::default() },
        ..PipelineConfig::default()
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} slices and {}", records.len(), path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let stage = match &cli.command {
        Command::Synth { dir, patients, slices } => return synth(dir, *patients, *slices, cli.seed.unwrap_or(0)),
        Command::Prepare => Stage::Prepare,
        Command::Patches => Stage::Patches,
        Command::Embed => Stage::Embed,
        Command::Cluster => Stage::Cluster,
        Command::Cavs => Stage::Cavs,
        Command::Score => Stage::Score,
        Command::Report | Command::All => Stage::Report,
        Command::Run { stage } => stage.parse()?,
    };
    let pipeline = Pipeline::new(load_config(cli)?, &cli.out)?;
    pipeline.run_to(stage)?;
    let log = pipeline.log();
    for s in &log.executed {
        log::info!("ran {s}");
    }
    for s in &log.cached {
        log::info!("reused {s}");
    }
    println!("{stage} complete in {}", cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
