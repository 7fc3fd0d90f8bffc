use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use worldgrow_cli::config::RunConfig;
use worldgrow_cli::pipeline::{self, parse_pair};
use worldgrow_core::flowgen::StageTag;

#[derive(Parser)]
#[command(
    name = "worldgrow",
    version,
    about = "Grow unbounded voxel scenes block by block and evaluate them"
)]
struct Cli {
    /// Run configuration file (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the dataset directory from the config.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Override the artifact directory from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    CoarseStructure,
    FineStructure,
    FineLatent,
}

impl From<StageArg> for StageTag {
    fn from(s: StageArg) -> StageTag {
        match s {
            StageArg::CoarseStructure => StageTag::CoarseStructure,
            StageArg::FineStructure => StageTag::FineStructure,
            StageArg::FineLatent => StageTag::FineLatent,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural world and curate block datasets.
    Curate {
        /// Column-occupancy threshold in (0, 1], e.g. 0.95.
        #[arg(long)]
        threshold: Option<String>,
    },
    /// Train one generator stage; resumes from its checkpoint if present.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Steps for this invocation (defaults to the config value).
        #[arg(long)]
        steps: Option<u32>,
    },
    /// Grow a world coarse-to-fine and export mesh plus report.
    Grow {
        /// Extent in coarse blocks, e.g. 3x3.
        #[arg(long, value_parser = parse_pair)]
        extent: Option<(u32, u32)>,
    },
    /// Re-run fine structure refinement on an existing coarse world.
    Refine {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Decode grown latents to a colored mesh.
    Decode {
        #[arg(long)]
        latents: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a generated block set against a reference set.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Expansion stability: inner 3x3 region vs outer ring of a world.
    Stability {
        /// Expected world size in fine blocks, e.g. 7x7.
        #[arg(long, value_parser = parse_pair)]
        world: Option<(u32, u32)>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("WORLDGROW_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("WORLDGROW_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.data_dir {
        cfg.data_dir = dir;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    match cli.cmd {
        Cmd::Curate { threshold } => pipeline::cmd_curate(&cfg, threshold.as_deref()),
        Cmd::Train { stage, steps } => pipeline::cmd_train(&cfg, stage.into(), steps),
        Cmd::Grow { extent } => pipeline::cmd_grow(&cfg, extent),
        Cmd::Refine { input } => pipeline::cmd_refine(&cfg, input),
        Cmd::Decode { latents, out } => pipeline::cmd_decode(&cfg, latents, out),
        Cmd::Eval {
            generated,
            reference,
        } => pipeline::cmd_eval(&cfg, &generated, &reference),
        Cmd::Stability {
            world,
            input,
            reference,
        } => pipeline::cmd_stability(&cfg, world, input, reference),
    }
}

fn main() -> ExitCode {
    // Clap exits with code 2 on usage errors before we get here.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
