use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use covsev_cli::config::{
    read_overrides, set_override, FilterKind, PipelineConfig, Scenario, SegmenterKind, SynthConfig,
};
use covsev_cli::data::synthesize;
use covsev_cli::lock::DirLock;
use covsev_cli::pipeline::{Arch, Pipeline};

/// COVID-19 severity classification from chest CT: synthetic data,
/// preprocessing, 2D and 3D models, evaluation and ensembling.
#[derive(Debug, Parser)]
#[command(name = "covsev", version)]
struct Cli {
    /// TOML pipeline config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed (section seeds are derived from it).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    scenario: Option<Scenario>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset manifest (overrides `paths.manifest`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset and its manifest.
    Synth,
    /// Fill the volume caches.
    Preprocess {
        #[arg(long, value_enum)]
        filter: Option<FilterKind>,
        #[arg(long, value_enum)]
        segmenter: Option<SegmenterKind>,
    },
    /// Train one architecture on every unit of the scenario.
    Train {
        #[arg(long, value_enum)]
        arch: Arch,
    },
    /// Score the best checkpoints and write per-architecture reports.
    Eval {
        /// Both architectures when omitted.
        #[arg(long, value_enum)]
        arch: Option<Arch>,
    },
    /// Combine the 2D and 3D predictions and write the comparison table.
    Ensemble,
    /// All stages in order.
    Run,
    /// Print the resolved config and its hash.
    Config,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ensemble => "ensemble",
            Command::Run => "run",
            Command::Config => "config",
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut table = match &cli.config {
        Some(path) => read_overrides(path)?,
        None => toml::Value::Table(Default::default()),
    };
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).context("--seed must fit in a signed 64-bit integer")?;
        set_override(&mut table, &["seed"], seed);
    }
    if let Some(s) = cli.scenario {
        set_override(&mut table, &["scenario"], s.name());
    }
    let path = |p: &PathBuf| p.to_string_lossy().into_owned();
    if let Some(out) = &cli.out {
        set_override(&mut table, &["paths", "out"], path(out));
    }
    if let Some(m) = &cli.manifest {
        set_override(&mut table, &["paths", "manifest"], path(m));
    }
    if let Command::Preprocess { filter, segmenter } = &cli.command {
        if let Some(f) = filter {
            set_override(&mut table, &["preprocess", "filter"], toml::Value::try_from(f)?);
        }
        if let Some(s) = segmenter {
            set_override(&mut table, &["preprocess", "segmenter"], toml::Value::try_from(s)?);
        }
    }
    PipelineConfig::from_toml_value(table)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli).context("config")?;
    if let Command::Config = cli.command {
        println!("# config hash {}\n{}", cfg.config_hash(), cfg.to_toml());
        return Ok(());
    }
    let _lock = DirLock::acquire(&cfg.paths.out)?;
    if let Command::Synth = cli.command {
        let synth = cfg.synth.clone().unwrap_or(SynthConfig {
            seed: cfg.seed,
            ..SynthConfig::default()
        });
        let manifest = cfg.paths.manifest();
        let root = manifest.parent().context("manifest path has no directory")?;
        let written = synthesize(&synth, root)?;
        if written.source_path != manifest.to_string_lossy() {
            covsev_core::dataset::write_manifest(&written, &manifest)?;
        }
        println!("{}", manifest.display());
        return Ok(());
    }
    let pipeline = Pipeline::open(cfg)?;
    match cli.command {
        Command::Preprocess { .. } => {
            let stats = pipeline.preprocess()?;
            println!("{} cached, {} built, {} stale", stats.hits, stats.built, stats.stale);
        }
        Command::Train { arch } => pipeline.train(arch)?,
        Command::Eval { arch } => {
            for a in arch.map(|a| vec![a]).unwrap_or(Arch::BOTH.to_vec()) {
                for r in pipeline.evaluate(a)? {
                    println!("{} {} {:.2}", r.scenario, r.model, r.macro_f1);
                }
            }
        }
        Command::Ensemble => {
            for r in pipeline.ensemble()? {
                println!("{} {} {:.2}", r.scenario, r.model, r.macro_f1);
            }
            println!("{}", pipeline.comparison_path().display());
        }
        Command::Run => {
            for path in pipeline.run()? {
                println!("{}", path.display());
            }
        }
        Command::Synth | Command::Config => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("covsev {}: {e:#}", cli.command.stage());
            ExitCode::FAILURE
        }
    }
}
