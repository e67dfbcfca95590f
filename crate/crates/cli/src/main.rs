mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use aquamvs::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Plane-sweep stereo with an underwater image formation model.
#[derive(Debug, Parser)]
#[command(name = "aquamvs", version)]
pub struct Cli {
    /// Worker threads; 1 makes every command bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by the commands that read a run configuration.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Plane counts of the coarse and fine stages.
    #[arg(long, value_parser = config::parse_planes)]
    pub planes: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    /// Rendered underwater images against the observed views.
    Image,
    /// Blended clear images against the ground-truth clear views.
    Clear,
    /// Restored views against the ground-truth clear views.
    Restored,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a scene file.
    Synth {
        /// Scene description (TOML); the built-in default scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Override the scene's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the depth of one view from its nearest neighbours.
    Depth {
        #[command(flatten)]
        run: RunArgs,
        /// Index of the target view in the manifest.
        #[arg(long)]
        view: usize,
    },
    /// Fit the medium subnet and colour MLP to a dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        iterations: Option<usize>,
        /// Train without the medium subnet.
        #[arg(long)]
        ablate: bool,
    },
    /// Render underwater, clear, attenuated, backscatter and depth images.
    Render {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target view index; every view when omitted.
        #[arg(long)]
        view: Option<usize>,
    },
    /// Remove the medium from an observed view.
    Restore {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target view index; every view when omitted.
        #[arg(long)]
        view: Option<usize>,
        /// Restore this image instead of the view's own (requires --view).
        #[arg(long, requires = "view")]
        image: Option<PathBuf>,
    },
    /// PSNR/SSIM of rendered images against ground truth on the central 80%.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory written by `render` or `restore`.
        #[arg(long)]
        renders: PathBuf,
        #[arg(long, value_enum, default_value = "image")]
        kind: EvalKind,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// 2 for usage and configuration problems, 3 for I/O, 4 for numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
