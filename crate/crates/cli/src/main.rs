//! `nrreg`: synthesize scenes, train the outlier classifier, prune
//! correspondences, register, and evaluate.

mod commands;
mod config;
mod failure;
mod histogram;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "nrreg", version, about = "Outlier pruning and non-rigid registration of point clouds")]
struct Cli {
    /// Pipeline configuration (flat TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed (scene, model init, training order).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scene bundle (or a dataset of bundles) from a scene spec.
    Synth {
        /// Scene spec (JSON).
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generate this many scenes as `scene-NNNN` subdirectories, seeds
        /// counting up from the spec's.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the classifier on a directory of scene bundles.
    Train {
        /// Directory of scene bundles.
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        model: PathBuf,
        /// Per-epoch loss log (CSV); defaults to `loss.csv` beside the model.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score correspondences and keep the predicted inliers.
    Prune {
        /// A corr.csv file or a scene bundle directory.
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output directory for corr.csv and scores.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an embedded-deformation warp to correspondences.
    Register {
        /// Correspondences (corr.csv).
        corr: PathBuf,
        /// Source cloud (PLY or XYZ).
        #[arg(long)]
        source: PathBuf,
        /// Output directory for warp.txt, warped.ply and cost-trace.csv.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth warp; prints accuracy when given.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Compare estimated warps with ground truth.
    Eval {
        /// Scene bundle directories (ground truth: source.ply + warp.txt).
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        /// Result directories (warp.txt, optional cost-trace.csv and
        /// corr.csv), one per scene.
        #[arg(long = "result", required = true)]
        results: Vec<PathBuf>,
        /// Output directory for the report and histogram.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences on a micro model.
    Gradcheck,
    /// Build the correspondence graph and report its structure.
    InspectGraph {
        /// A corr.csv file, a scene directory, or a point cloud.
        input: PathBuf,
        /// Write the graph dump and per-node consistency statistics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        commands::set_threads(n)?;
    }
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    }
    .with_seed(cli.seed);
    match cli.command {
        Command::Synth { spec, out, count } => commands::synth(&spec, &out, count, cli.seed),
        Command::Train { data, model, log } => commands::train(&cfg, &data, &model, log.as_deref()),
        Command::Prune { input, model, out } => commands::prune(&cfg, &input, &model, &out),
        Command::Register { corr, source, out, gt } => commands::register(&cfg, &corr, &source, &out, gt.as_deref()),
        Command::Eval { scenes, results, out } => commands::eval(&scenes, &results, &out),
        Command::Gradcheck => commands::gradcheck(cli.seed.unwrap_or(0)),
        Command::InspectGraph { input, out } => commands::inspect_graph(&cfg, &input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(failure::exit_code(failure::classify(&err)) as u8)
        }
    }
}
