use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nerfrestore::config::RunConfig;
use nerfrestore::diffusion::SamplerKind;
use nerfrestore::pipeline::{restore_file, Pipeline};
use nerfrestore::Result;

#[derive(Parser)]
#[command(
    name = "nerfrestore",
    about = "Voxel radiance field training with latent-diffusion restoration"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Config override `key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Reverse sampler, `ddim` or `ddpm`.
    #[arg(long, global = true)]
    sampler: Option<SamplerKind>,
    /// Reverse sampling steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Latent tile size.
    #[arg(long, global = true)]
    tile: Option<usize>,
    /// Latent tile stride.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Width of the Gaussian tile weights.
    #[arg(long, global = true)]
    tile_sigma: Option<f64>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the reference view set.
    MakeDataset,
    /// Train the codec and the unconditional diffusion prior.
    TrainCodec,
    /// Train the voxel grid jointly with the diffusion conditioning branch.
    TrainStage1 {
        /// Train the field first, then the diffusion branch on its final renderings.
        #[arg(long)]
        separate_stage1: bool,
    },
    /// Train CFW, the decoder and the discriminator.
    TrainStage2,
    /// Restore one PNG with a stage-two checkpoint.
    Restore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fidelity weight in [0, 1].
        #[arg(long, default_value_t = 1.0)]
        w: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score restored test views.
    Evaluate,
    /// Every stage in order, then evaluation.
    RunAll {
        #[arg(long)]
        separate_stage1: bool,
    },
}

fn overrides(g: &Global, separate: bool) -> Vec<String> {
    let mut out = g.overrides.clone();
    if let Some(s) = g.seed {
        out.push(format!("seed={s}"));
    }
    if let Some(s) = g.sampler {
        out.push(format!("diffusion.sampler={s}"));
    }
    if let Some(n) = g.steps {
        out.push(format!("diffusion.steps={n}"));
    }
    if let Some(t) = g.tile {
        out.push(format!("tiling.tile={t}"));
    }
    if let Some(s) = g.stride {
        out.push(format!("tiling.stride={s}"));
    }
    if let Some(s) = g.tile_sigma {
        out.push(format!("tiling.sigma={s}"));
    }
    if separate {
        out.push("stage1.separate=true".into());
    }
    out
}

fn config(g: &Global, separate: bool) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&overrides(g, separate))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Restore {
            input,
            checkpoint,
            w,
            out,
        } => {
            if !(0.0..=1.0).contains(&w) {
                return Err(nerfrestore::Error::InvalidArgument(format!(
                    "--w must lie in [0, 1], got {w}"
                )));
            }
            // Sampling flags apply on top of the config the checkpoint was trained with.
            let ck = nerfrestore::checkpoint::Checkpoint::load(&checkpoint)?;
            let mut cfg = RunConfig::parse_str(ck.meta("config")?)?;
            cfg.apply_overrides(&overrides(g, false))?;
            restore_file(
                &checkpoint,
                &input,
                &out,
                w,
                &cfg.sampler_config(),
                cfg.seed,
            )?;
            if !g.quiet {
                eprintln!("wrote {}", out.display());
            }
        }
        Command::MakeDataset => {
            Pipeline::new(config(g, false)?, &g.out_dir, g.quiet)?.make_dataset()?;
        }
        Command::TrainCodec => {
            Pipeline::new(config(g, false)?, &g.out_dir, g.quiet)?.train_codec()?
        }
        Command::TrainStage1 { separate_stage1 } => {
            Pipeline::new(config(g, separate_stage1)?, &g.out_dir, g.quiet)?.train_stage1()?;
        }
        Command::TrainStage2 => {
            Pipeline::new(config(g, false)?, &g.out_dir, g.quiet)?.train_stage2()?;
        }
        Command::Evaluate => {
            let report = Pipeline::new(config(g, false)?, &g.out_dir, g.quiet)?.evaluate()?;
            print!("{}", report.to_csv()?);
        }
        Command::RunAll { separate_stage1 } => {
            let report =
                Pipeline::new(config(g, separate_stage1)?, &g.out_dir, g.quiet)?.run_all()?;
            print!("{}", report.to_csv()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
