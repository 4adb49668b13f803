use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlct::pipeline::{self, load_config, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "xlct", version, about = "Virtual focused-beam XLCT scanner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the phantom
    Phantom(Common),
    /// Simulate XLCT counts and the CT sinogram
    Simulate(Common),
    /// Reconstruct nanophosphor concentration from counts
    ReconXlct(Common),
    /// Filtered backprojection of the CT sinogram
    ReconCt(Common),
    /// Resolution, CNR, Dice, CT accuracy, scan time, optional sweep
    Metrics(Common),
    /// All stages, plus a manifest of every artifact
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> xlct::Result<PipelineConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.normalized()
    }
}

fn run(cli: Cli) -> xlct::Result<()> {
    let (stage, common) = match &cli.command {
        Command::Phantom(c) => (Some(Stage::Phantom), c),
        Command::Simulate(c) => (Some(Stage::Simulate), c),
        Command::ReconXlct(c) => (Some(Stage::ReconXlct), c),
        Command::ReconCt(c) => (Some(Stage::ReconCt), c),
        Command::Metrics(c) => (Some(Stage::Metrics), c),
        Command::Pipeline(c) => (None, c),
    };
    let cfg = common.config()?;
    let artifacts = match stage {
        Some(stage) => pipeline::with_threads(cfg.threads, || {
            pipeline::run_stage(stage, &cfg, &cfg.output_dir)
        })?,
        None => pipeline::run_pipeline(&cfg)?.artifacts,
    };
    for a in artifacts {
        for f in a.files {
            println!("{}\t{}\t{}", a.name, f.sha256, cfg.output_dir.join(&f.path).display());
        }
    }
    if stage == Some(Stage::Metrics) || stage.is_none() {
        let text = std::fs::read_to_string(cfg.output_dir.join("metrics.txt"))
            .map_err(|e| xlct::Error::Io { path: cfg.output_dir.join("metrics.txt"), source: e })?;
        print!("{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
