//! `warpdepth` command-line tool.
//!
//! Settings are resolved with the precedence: command-line flag, then
//! `WARPDEPTH_*` environment variable, then the `--config` TOML file, then
//! built-in defaults.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 numeric failure, 3 I/O.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use warpdepth::objective::Variant;

use crate::commands::Direction;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "warpdepth",
    version,
    about = "Depth and ego-motion from three frames by view synthesis"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, env = "WARPDEPTH_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "WARPDEPTH_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, env = "WARPDEPTH_VARIANT")]
    variant: Option<VariantArg>,
    /// Number of depth scales.
    #[arg(long, global = true, env = "WARPDEPTH_SCALES")]
    scales: Option<usize>,
    /// Per-pixel object motion.
    #[arg(long, global = true, value_enum, env = "WARPDEPTH_MOTION")]
    motion: Option<Toggle>,
    #[arg(long, global = true, env = "WARPDEPTH_ITERATIONS")]
    iterations: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "WARPDEPTH_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "WARPDEPTH_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Min,
    Avg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Forward,
    Inverse,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene bundle (frames, depth, motion, poses).
    Synth,
    /// Optimize depth, pose and motion for a scene bundle.
    Optimize {
        /// Directory written by `synth`.
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Compare a predicted depth map with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Depth cap in metres.
        #[arg(long, default_value_t = warpdepth::evaluation::DEFAULT_CAP)]
        cap: f64,
    },
    /// Warp one image with a depth map and a relative pose.
    Warp {
        #[arg(long)]
        image: PathBuf,
        /// Depth of the image to be synthesized, as PFM.
        #[arg(long)]
        depth: PathBuf,
        /// `rx,ry,rz,tx,ty,tz`: axis-angle rotation then translation.
        #[arg(
            long,
            value_delimiter = ',',
            allow_negative_numbers = true,
            required = true
        )]
        pose: Vec<f64>,
        #[arg(long, value_enum, default_value = "inverse")]
        direction: DirectionArg,
    },
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = common.variant {
        cfg.variant = match v {
            VariantArg::Min => Variant::Min,
            VariantArg::Avg => Variant::Avg,
        };
    }
    if let Some(s) = common.scales {
        cfg.scales = s;
    }
    if let Some(m) = common.motion {
        cfg.motion = matches!(m, Toggle::On);
    }
    if let Some(n) = common.iterations {
        cfg.iterations = n;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli.common)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Optimize { bundle } => commands::optimize(&cfg, &bundle),
        Command::Eval { pred, truth, cap } => commands::eval(&cfg, &pred, &truth, cap),
        Command::Warp {
            image,
            depth,
            pose,
            direction,
        } => {
            let pose: [f64; 6] = pose
                .try_into()
                .map_err(|_| CliError::usage("--pose takes exactly six values"))?;
            let direction = match direction {
                DirectionArg::Forward => Direction::Forward,
                DirectionArg::Inverse => Direction::Inverse,
            };
            commands::warp(&cfg, &image, &depth, pose, direction)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
