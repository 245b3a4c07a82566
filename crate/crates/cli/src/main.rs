use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use dcpsim::experiment::{run_experiment, ExperimentConfig, Mode};

/// Runs a dcpsim experiment described by a TOML config.
#[derive(Debug, Parser)]
#[command(name = "dcpsim", version)]
struct Args {
    /// Experiment config file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the config's mode.
    #[arg(long, value_parser = ["simulate", "sweep", "calibrate-bucket", "validate-merge"])]
    mode: Option<String>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run(args: Args) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(mode) = &args.mode {
        config.mode = mode.parse::<Mode>().map_err(anyhow::Error::msg)?;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let base_dir = args.config.parent().unwrap_or(Path::new("."));
    let out = run_experiment(&config, base_dir, args.out.as_deref())
        .with_context(|| format!("{} run from {}", config.mode.as_str(), args.config.display()))?;
    print!("{}", out.summary);
    for f in &out.files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dcpsim: {e:#}");
            ExitCode::FAILURE
        }
    }
}
