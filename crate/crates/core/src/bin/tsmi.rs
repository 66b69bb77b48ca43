use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tsmi::forecaster::HookSite;
use tsmi::pipeline::{ExperimentConfig, Pipeline};
use tsmi::Result;

#[derive(Parser)]
#[command(version, about = "Sparse-autoencoder interpretability pipeline for a time-series forecaster")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "configs/desk.json")]
    config: PathBuf,
    /// Overrides the config's work directory.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restricts per-site stages to this site (repeatable).
    #[arg(long, global = true)]
    site: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Stage {
    GenData,
    TrainModel,
    Extract,
    TrainSae,
    Taxonomy,
    Ablate,
    Report,
    /// Every stage in order.
    All,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(&cli.config)?;
    let mut p = Pipeline::new(cfg, cli.workdir, cli.seed)?;
    if !cli.site.is_empty() {
        let sites = cli
            .site
            .iter()
            .map(|s| s.parse::<HookSite>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| tsmi::Error::Config(vec![format!("--site: {e}")]))?;
        p = p.with_sites(sites)?;
    }
    let name = match cli.stage {
        Stage::GenData => "gen-data",
        Stage::TrainModel => "train-model",
        Stage::Extract => "extract",
        Stage::TrainSae => "train-sae",
        Stage::Taxonomy => "taxonomy",
        Stage::Ablate => "ablate",
        Stage::Report => {
            let (text, _) = p.report()?;
            print!("{text}");
            "report"
        }
        Stage::All => {
            p.run_all()?;
            print!("{}", p.report()?.0);
            return Ok(());
        }
    };
    p.run_stage(name)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
