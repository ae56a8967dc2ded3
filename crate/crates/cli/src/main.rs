//! `diffad`: synthesize data, augment, train, detect and evaluate.
//!
//! Exit codes: 0 success, 2 config, 3 i/o, 4 training diverged,
//! 5 checkpoint or point-count mismatch, 6 a split has a single class.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffad::patchgen::{DefectKind, SelectionRatio};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "diffad",
    version,
    about = "Point-cloud anomaly detection by displacement diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic dataset class and print its manifest path.
    Synth(Common),
    /// Apply Patch-Gen to a PLY file or every PLY in a directory.
    Augment(Common),
    /// Train a model on a manifest's training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct and score test clouds; writes scores.tsv and maps/.
    Detect(Common),
    /// Compute I-AUROC and P-AUROC from a score table and a manifest.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Neighbourhood size for point-cluster scores.
    #[arg(long)]
    k: Option<usize>,
    /// Patch selection ratio, `a/b` or decimal.
    #[arg(long)]
    ratio: Option<SelectionRatio>,
    /// Displacement scale S.
    #[arg(long)]
    scale: Option<f64>,
    /// Defect kind: bulge, sink or damage (default: random per sample).
    #[arg(long)]
    kind: Option<DefectKind>,
    /// Diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Training batch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PLY file or directory of PLY files.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Score table written by `detect`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Centre and scale inputs before detection.
    #[arg(long)]
    normalize: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            k: self.k,
            ratio: self.ratio,
            scale: self.scale,
            kind: self.kind,
            steps: self.steps,
            iterations: self.iterations,
            batch: self.batch,
            normalize: self.normalize,
            out: self.out.clone(),
            manifest: self.manifest.clone(),
            checkpoint: self.checkpoint.clone(),
            input: self.input.clone(),
            scores: self.scores.clone(),
        })?;
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(CliError::Config("--threads must be >= 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => commands::synth(&c.resolve()?),
        Command::Augment(c) => commands::augment(&c.resolve()?),
        Command::Train { common, resume } => commands::train(&common.resolve()?, resume.as_deref()),
        Command::Detect(c) => commands::detect_cmd(&c.resolve()?),
        Command::Eval(c) => commands::eval(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIFFAD_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
