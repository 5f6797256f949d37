use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use candid::checkpoint::Checkpoint;
use candid::imaging::{self, Image};
use candid::net::{self, FlowSource, Model};
use candid::noise::{self, NoiseMode};
use candid::pipeline::{self, AblationVariant, TrainConfig};
use candid::prefilter::{BilateralDenoiser, DirectoryDenoiser, FrameDenoiser};
use candid::{flow, util};

#[derive(Parser)]
#[command(name = "candid", about = "Burst image denoising toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    /// Randomized training range.
    Train,
    /// Evaluation level 1 (sigma_r 10^-2.2, sigma_s 10^-2.6).
    Lvl1,
    /// Evaluation level 2 (sigma_r 10^-1.8, sigma_s 10^-2.2).
    Lvl2,
}

impl From<Level> for NoiseMode {
    fn from(l: Level) -> NoiseMode {
        match l {
            Level::Train => NoiseMode::Train,
            Level::Lvl1 => NoiseMode::EvalLvl1,
            Level::Lvl2 => NoiseMode::EvalLvl2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    NoPrefilter,
    NoAlign,
    NoAdaptiveFilter,
}

impl From<VariantArg> for AblationVariant {
    fn from(v: VariantArg) -> AblationVariant {
        match v {
            VariantArg::NoPrefilter => AblationVariant::NoPrefilter,
            VariantArg::NoAlign => AblationVariant::NoAlign,
            VariantArg::NoAdaptiveFilter => AblationVariant::NoAdaptiveFilter,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize shifted noisy burst directories from clean images.
    Synth(SynthArgs),
    /// Train the fusion network from a JSON config.
    Train(TrainArgs),
    /// Denoise one burst directory with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Evaluate a checkpoint over a directory of clean images.
    Eval(EvalArgs),
    /// Train an ablated variant from scratch, then evaluate it.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean images.
    #[arg(long)]
    input: PathBuf,
    /// Output root; one burst directory per input image.
    #[arg(long)]
    out: PathBuf,
    /// Noise level.
    #[arg(long, value_enum, default_value = "lvl1")]
    level: Level,
    #[arg(long, default_value_t = 4)]
    burst_size: usize,
    /// Maximum per-frame translation in pixels.
    #[arg(long, default_value_t = 4.0)]
    max_shift: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep color instead of converting to grayscale.
    #[arg(long)]
    color: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file (exactly the training-config keys).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Burst directory (frame_000.png ..., meta.json, optional gt.png).
    #[arg(long)]
    burst: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output image path; an error map lands next to it when gt.png exists.
    #[arg(long, default_value = "I_pred.png")]
    out: PathBuf,
    /// Residual scaling for the error map.
    #[arg(long, default_value_t = 5.0)]
    error_scale: f32,
    /// Directory of precomputed flow fields (flow_001.flo ...).
    #[arg(long)]
    flow_dir: Option<PathBuf>,
    /// Directory with mild/ and strong/ precomputed prefiltered frames.
    #[arg(long)]
    prefiltered_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of clean images.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "lvl1")]
    level: Level,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    max_shift: f32,
    /// Write the JSON report here (table always goes to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON training config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Clean images for the post-training evaluation.
    #[arg(long)]
    eval_dataset: PathBuf,
    #[arg(long, value_enum, default_value = "lvl1")]
    level: Level,
    /// Evaluation seed (training uses the config's seed).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => {
            let mut cfg = TrainConfig::load(&a.config)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let outcome = pipeline::train(&cfg)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint at {}",
                outcome.steps_run,
                outcome.final_loss,
                cfg.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => {
            let report = pipeline::evaluate_checkpoint(&a.checkpoint, &a.dataset, a.level.into(), a.seed, a.max_shift, false)?;
            print!("{}", report.to_text());
            if let Some(out) = a.out {
                report.save(out)?;
            }
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = TrainConfig::load(&a.config)?;
            let report = pipeline::ablate(&cfg, AblationVariant::from(a.variant), &a.eval_dataset, a.level.into(), a.seed)?;
            print!("{}", report.to_text());
            if let Some(out) = a.out {
                report.save(out)?;
            }
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mode: NoiseMode = a.level.into();
    let dataset = pipeline::load_dataset(&a.input, 16, a.color)?;
    std::fs::create_dir_all(&a.out)?;
    for (name, img) in dataset.names.iter().zip(&dataset.images) {
        let seed = a.seed ^ util::fnv1a(name);
        let params = noise::sample_noise_params(&mut ChaCha8Rng::seed_from_u64(seed), mode);
        let burst = noise::synthesize_burst(img, a.burst_size, a.max_shift, &params, seed)?;
        let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
        let dir = a.out.join(stem);
        noise::write_burst_dir(&burst, &dir, seed)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn denoise(a: DenoiseArgs) -> Result<(), Box<dyn std::error::Error>> {
    let loaded = noise::read_burst_dir(&a.burst)?;
    let cp = Checkpoint::load(&a.checkpoint)?;
    let cfg = Model::config_from_checkpoint(&cp)?;
    let model = Model::from_checkpoint(&cp, cfg)?;
    let params = noise::NoiseParams::new(loaded.meta.sigma_r, loaded.meta.sigma_s);
    let flow_source = match &a.flow_dir {
        Some(dir) => FlowSource::Given(flow::read_flow_dir(dir, loaded.frames.len() - 1)?),
        None => FlowSource::Estimate,
    };
    let denoiser: Box<dyn FrameDenoiser> = match &a.prefiltered_dir {
        Some(dir) => Box::new(DirectoryDenoiser::new(dir)),
        None => Box::new(BilateralDenoiser::new()),
    };
    let out = model.forward(&loaded.frames, &params, denoiser.as_ref(), &flow_source)?;
    let pred = net::tensor_to_image(&out.pred)?;
    imaging::save_image(&pred, &a.out)?;
    println!("{}", a.out.display());
    if let Some(gt) = &loaded.ground_truth {
        let err = error_map(&pred, gt, a.error_scale)?;
        let err_path = a.out.with_file_name("error.png");
        imaging::save_image(&err, &err_path)?;
        println!("{}", err_path.display());
    }
    Ok(())
}

/// Scaled absolute residual, clamped to [0, 1].
fn error_map(pred: &Image, gt: &Image, scale: f32) -> Result<Image, imaging::ImageError> {
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| ((p - g).abs() * scale).min(1.0))
        .collect();
    Image::new(pred.height(), pred.width(), pred.channels(), data)
}
