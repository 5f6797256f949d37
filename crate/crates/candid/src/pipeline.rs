//! Dataset ingestion, the end-to-end training loop, evaluation at the two
//! fixed noise levels and the ablation runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::flow;
use crate::imaging::{self, Image, ImageError};
use crate::net::{self, FlowSource, Model, NetConfig, NetError};
use crate::noise::{self, NoiseError, NoiseMode, SyntheticBurst};
use crate::prefilter::BilateralDenoiser;
use crate::tensor::{adam_step, AdamState, TensorError};
use crate::util;

/// Full-scale PSNR references reported by the original evaluation
/// (grayscale / color burst benchmarks at the two noise levels). Desk-scale
/// runs are not expected to reach them; they appear in reports for context.
pub const PAPER_REF_GRAYSCALE: [f64; 2] = [41.35, 36.61];
pub const PAPER_REF_COLOR: [f64; 2] = [42.49, 39.18];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] flow::FlowError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("dataset {0}: {1}")]
    BadDataset(String, String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_patch_size() -> usize { 48 }
fn default_burst_size() -> usize { 4 }
fn default_max_shift() -> f32 { 4.0 }
fn default_batch_size() -> usize { 4 }
fn default_total_steps() -> u64 { 5000 }
fn default_lr() -> f32 { 1e-4 }
fn default_beta1() -> f32 { 0.9 }
fn default_beta2() -> f32 { 0.999 }
fn default_epsilon() -> f32 { 1e-8 }
fn default_feature_hidden() -> usize { 16 }
fn default_feature_channels() -> usize { 8 }
fn default_kernel_hidden() -> usize { 32 }
fn default_fusion_hidden() -> usize { 32 }
fn default_checkpoint_every() -> u64 { 1000 }

/// Training configuration; the JSON config file carries exactly these keys
/// and unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_burst_size")]
    pub burst_size: usize,
    #[serde(default = "default_max_shift")]
    pub max_shift: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
    #[serde(default = "default_feature_hidden")]
    pub feature_hidden: usize,
    #[serde(default = "default_feature_channels")]
    pub feature_channels: usize,
    #[serde(default = "default_kernel_hidden")]
    pub kernel_hidden: usize,
    #[serde(default = "default_fusion_hidden")]
    pub fusion_hidden: usize,
    /// Train on RGB patches instead of grayscale.
    #[serde(default)]
    pub color: bool,
    pub dataset_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Training log CSV; defaults to `<checkpoint>.log.csv`.
    #[serde(default)]
    pub log_path: Option<PathBuf>,
    /// Continue from an existing checkpoint + optimizer state.
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub no_prefilter: bool,
    #[serde(default)]
    pub no_align: bool,
    #[serde(default)]
    pub no_adaptive_filter: bool,
}

impl TrainConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, checkpoint_path: impl Into<PathBuf>) -> TrainConfig {
        serde_json::from_value(serde_json::json!({
            "dataset_dir": dataset_dir.into(),
            "checkpoint_path": checkpoint_path.into(),
        }))
        .expect("defaults")
    }

    pub fn from_json(bytes: &[u8]) -> Result<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_slice(bytes).map_err(|e| PipelineError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        TrainConfig::from_json(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 16 {
            return Err(PipelineError::BadConfig(format!("patch_size {} < 16", self.patch_size)));
        }
        if self.burst_size < 1 {
            return Err(PipelineError::BadConfig("burst_size must be >= 1".into()));
        }
        if self.batch_size < 1 || self.total_steps < 1 {
            return Err(PipelineError::BadConfig("batch_size and total_steps must be >= 1".into()));
        }
        if self.max_shift < 0.0 {
            return Err(PipelineError::BadConfig("max_shift must be >= 0".into()));
        }
        if !(self.lr > 0.0 && self.epsilon > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PipelineError::BadConfig("bad optimizer hyperparameters".into()));
        }
        if !self.dataset_dir.is_dir() {
            return Err(PipelineError::BadConfig(format!("dataset_dir {} is not a directory", self.dataset_dir.display())));
        }
        if let Some(parent) = self.checkpoint_path.parent() {
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                return Err(PipelineError::BadConfig(format!("checkpoint directory {} does not exist", parent.display())));
            }
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            burst_size: self.burst_size,
            channels: if self.color { 3 } else { 1 },
            streams: if self.no_prefilter { 1 } else { 3 },
            feature_hidden: self.feature_hidden,
            feature_channels: self.feature_channels,
            kernel_hidden: self.kernel_hidden,
            fusion_hidden: self.fusion_hidden,
            adaptive_filter: !self.no_adaptive_filter,
        }
    }

    fn flow_source(&self) -> FlowSource {
        if self.no_align {
            FlowSource::Identity
        } else {
            FlowSource::Estimate
        }
    }

    fn log_path(&self) -> PathBuf {
        self.log_path.clone().unwrap_or_else(|| {
            let mut p = self.checkpoint_path.clone().into_os_string();
            p.push(".log.csv");
            PathBuf::from(p)
        })
    }

    pub fn variant_name(&self) -> &'static str {
        if self.no_prefilter {
            "no_prefilter"
        } else if self.no_align {
            "no_align"
        } else if self.no_adaptive_filter {
            "no_adaptive_filter"
        } else {
            "full"
        }
    }
}

/// Ablation variants (one pipeline stage removed, trained from scratch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    NoPrefilter,
    NoAlign,
    NoAdaptiveFilter,
}

impl AblationVariant {
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        cfg.no_prefilter = false;
        cfg.no_align = false;
        cfg.no_adaptive_filter = false;
        match self {
            AblationVariant::NoPrefilter => cfg.no_prefilter = true,
            AblationVariant::NoAlign => cfg.no_align = true,
            AblationVariant::NoAdaptiveFilter => cfg.no_adaptive_filter = true,
        }
        cfg
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Clean images loaded from a directory, in sorted filename order.
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Image>,
}

/// Load every supported image in `dir`, converting to grayscale unless
/// `color`. With a `min_size`, images smaller than the patch are rejected.
pub fn load_dataset(dir: impl AsRef<Path>, min_size: usize, color: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let dstr = dir.display().to_string();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::BadDataset(dstr, "no readable images".into()));
    }
    let mut names = Vec::new();
    let mut images = Vec::new();
    for f in files {
        let img = imaging::load_image(&f)?;
        let img = if color { img } else { img.to_grayscale() };
        if img.height() < min_size || img.width() < min_size {
            continue;
        }
        names.push(f.file_name().unwrap().to_string_lossy().into_owned());
        images.push(img);
    }
    if images.is_empty() {
        return Err(PipelineError::BadDataset(dstr, format!("all images smaller than {min_size}")));
    }
    Ok(Dataset { names, images })
}

impl Dataset {
    /// Uniform random crop from a uniformly chosen image.
    pub fn sample_patch(&self, patch: usize, rng: &mut impl Rng) -> Image {
        let img = &self.images[rng.random_range(0..self.images.len())];
        let y0 = rng.random_range(0..=img.height() - patch);
        let x0 = rng.random_range(0..=img.width() - patch);
        img.crop(y0, x0, patch, patch).expect("crop within bounds")
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// RNG stream for item `item` of step `step`; stream 0 is reserved for
/// initialization-time draws.
fn step_rng(seed: u64, step: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((step << 16) | item as u64));
    rng
}

pub struct TrainOutcome {
    pub model: Model,
    pub final_loss: f32,
    pub steps_run: u64,
}

/// End-to-end training: sample a clean patch, synthesize a shifted noisy
/// burst, run the pipeline, L1 loss against the clean reference-geometry
/// patch, backprop, ADAM. The pre-filter and flow stages contribute no
/// gradients. Checkpoints (weights, plus optimizer state in a sibling
/// `.optim` file) are written every `checkpoint_every` steps and at
/// completion; a `step,loss,psnr_probe` CSV log is persisted.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    crate::util::enable_flush_to_zero();
    config.validate()?;
    let dataset = load_dataset(&config.dataset_dir, config.patch_size, config.color)?;
    let denoiser = BilateralDenoiser::new();
    let net_cfg = config.net_config();
    let flow_source = config.flow_source();

    let mut model = Model::init(net_cfg, config.seed);
    let params = model.params();
    let tensors: Vec<_> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut state = AdamState::with_hyperparams(&tensors, config.lr, config.beta1, config.beta2, config.epsilon);
    let mut start_step: u64 = 0;
    let mut log = String::from("step,loss,psnr_probe\n");

    if config.resume && config.checkpoint_path.exists() {
        let cp = Checkpoint::load(&config.checkpoint_path)?;
        model = Model::from_checkpoint(&cp, net_cfg)?;
        let optim = Checkpoint::load(&optim_path(&config.checkpoint_path))?;
        start_step = optim.get("step_count")?.data[0] as u64;
        state.step_count = start_step;
        for (i, (name, _)) in model.params().iter().enumerate() {
            state.first_moment[i] = optim.get(&format!("adam.{name}.m"))?.data.clone();
            state.second_moment[i] = optim.get(&format!("adam.{name}.v"))?.data.clone();
        }
    }
    let params = model.params();
    let tensors: Vec<_> = params.iter().map(|(_, t)| t.clone()).collect();

    // fixed probe burst for the periodic PSNR column
    let probe_gt = dataset.images[0]
        .crop(0, 0, config.patch_size.min(dataset.images[0].height()), config.patch_size.min(dataset.images[0].width()))?;
    let probe_params = noise::sample_noise_params(&mut step_rng(config.seed, 1 << 40, 0), NoiseMode::EvalLvl1);

    let mut final_loss = f32::NAN;
    for step in start_step..config.total_steps {
        let mut batch_loss = 0.0f32;
        for item in 0..config.batch_size {
            let mut rng = step_rng(config.seed, step, item);
            let patch = dataset.sample_patch(config.patch_size, &mut rng);
            let params_n = noise::sample_noise_params(&mut rng, NoiseMode::Train);
            let burst_seed: u64 = rng.random();
            let burst = noise::synthesize_burst(&patch, config.burst_size, config.max_shift, &params_n, burst_seed)?;
            let out = model.forward(&burst.frames, &burst.params, &denoiser, &flow_source)?;
            let target = net::image_to_tensor(&burst.ground_truth)?;
            let loss = out.pred.l1_loss(&target)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(PipelineError::NonFiniteLoss { step });
            }
            batch_loss += loss_value;
            // scale so accumulated gradients average over the batch
            loss.scale(1.0 / config.batch_size as f32)?.backward()?;
        }
        batch_loss /= config.batch_size as f32;
        final_loss = batch_loss;
        adam_step(&tensors, &mut state)?;
        model.zero_grads();

        let step1 = step + 1;
        let probe = if step1 % 500 == 0 || step1 == config.total_steps {
            let burst = noise::synthesize_burst(&probe_gt, config.burst_size, config.max_shift, &probe_params, config.seed)?;
            let out = model.forward(&burst.frames, &burst.params, &denoiser, &flow_source)?;
            let pred = net::tensor_to_image(&out.pred)?;
            format!("{:.4}", imaging::psnr(&pred, &burst.ground_truth)?)
        } else {
            String::new()
        };
        let _ = writeln!(log, "{step1},{batch_loss},{probe}");
        if step1 % config.checkpoint_every == 0 || step1 == config.total_steps {
            save_training_state(&model, &state, config)?;
            let lp = config.log_path();
            util::write_atomic(&lp, log.as_bytes()).map_err(io_err(&lp))?;
        }
    }
    Ok(TrainOutcome { model, final_loss, steps_run: config.total_steps - start_step })
}

fn optim_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.to_path_buf().into_os_string();
    p.push(".optim");
    PathBuf::from(p)
}

fn save_training_state(model: &Model, state: &AdamState, config: &TrainConfig) -> Result<()> {
    model.to_checkpoint().save(&config.checkpoint_path)?;
    let mut optim = Checkpoint::default();
    optim.push("step_count", vec![1], vec![state.step_count as f32]);
    for (i, (name, _)) in model.params().iter().enumerate() {
        optim.push(format!("adam.{name}.m"), vec![state.first_moment[i].len()], state.first_moment[i].clone());
        optim.push(format!("adam.{name}.v"), vec![state.second_moment[i].len()], state.second_moment[i].clone());
    }
    optim.save(optim_path(&config.checkpoint_path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    /// PSNR of the raw noisy reference frame.
    pub noisy_psnr: f64,
    /// PSNR of the mean of flow-aligned raw frames.
    pub aligned_mean_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: String,
    pub variant: String,
    pub seed: u64,
    pub mean_psnr: f64,
    pub mean_noisy_psnr: f64,
    pub mean_aligned_mean_psnr: f64,
    pub per_image: Vec<ImageScore>,
    /// Config echo for reproducibility.
    pub config: serde_json::Value,
    /// Full-scale reference values from the original evaluation, for context
    /// only (grayscale / color at this level).
    pub paper_reference_grayscale: f64,
    pub paper_reference_color: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("serialize report");
        v.push(b'\n');
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        util::write_atomic(path, &self.to_json()).map_err(io_err(path))
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "evaluation: level={} variant={} seed={}", self.level, self.variant, self.seed);
        let _ = writeln!(s, "{:<24} {:>9} {:>9} {:>13}", "image", "psnr", "noisy", "aligned-mean");
        for r in &self.per_image {
            let _ = writeln!(s, "{:<24} {:>9.4} {:>9.4} {:>13.4}", r.name, r.psnr, r.noisy_psnr, r.aligned_mean_psnr);
        }
        let _ = writeln!(s, "{:<24} {:>9.4} {:>9.4} {:>13.4}", "mean", self.mean_psnr, self.mean_noisy_psnr, self.mean_aligned_mean_psnr);
        let _ = writeln!(
            s,
            "full-scale reference at this level: grayscale {:.2} dB / color {:.2} dB",
            self.paper_reference_grayscale, self.paper_reference_color
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub level: NoiseMode,
    pub seed: u64,
    pub burst_size: usize,
    pub max_shift: f32,
    pub color: bool,
    pub variant: String,
    pub config_echo: serde_json::Value,
}

fn level_name(mode: NoiseMode) -> &'static str {
    match mode {
        NoiseMode::Train => "train",
        NoiseMode::EvalLvl1 => "lvl1",
        NoiseMode::EvalLvl2 => "lvl2",
    }
}

fn level_index(mode: NoiseMode) -> usize {
    match mode {
        NoiseMode::EvalLvl2 => 1,
        _ => 0,
    }
}

/// Average of the flow-aligned frames (the trivial fusion baseline).
pub fn aligned_mean_baseline(frames: &[Image]) -> Result<Image> {
    let flows = flow::estimate_burst_flows(frames)?;
    let mut acc: Vec<f32> = frames[0].data().to_vec();
    for (i, fl) in flows.iter().enumerate() {
        let warped = flow::warp(&frames[i + 1], fl)?;
        for (a, v) in acc.iter_mut().zip(warped.data()) {
            *a += v;
        }
    }
    let n = frames.len() as f32;
    for a in &mut acc {
        *a /= n;
    }
    Ok(Image::new(frames[0].height(), frames[0].width(), frames[0].channels(), acc)?)
}

/// Evaluation over any predictor (used both for trained models and baseline
/// stubs). Per-image seeds are derived by hashing the filename so scores are
/// comparable across runs.
pub fn evaluate_with<F>(predict: F, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport>
where
    F: Fn(&SyntheticBurst) -> Result<Image>,
{
    let params = noise::sample_noise_params(&mut ChaCha8Rng::seed_from_u64(opts.seed), opts.level);
    let mut per_image = Vec::new();
    for (name, img) in dataset.names.iter().zip(&dataset.images) {
        let seed = opts.seed ^ util::fnv1a(name);
        let burst = noise::synthesize_burst(img, opts.burst_size, opts.max_shift, &params, seed)?;
        let pred = predict(&burst)?;
        per_image.push(ImageScore {
            name: name.clone(),
            psnr: imaging::psnr(&pred, &burst.ground_truth)?,
            noisy_psnr: imaging::psnr(&burst.frames[0], &burst.ground_truth)?,
            aligned_mean_psnr: imaging::psnr(&aligned_mean_baseline(&burst.frames)?, &burst.ground_truth)?,
        });
    }
    let n = per_image.len() as f64;
    let li = level_index(opts.level);
    Ok(EvalReport {
        level: level_name(opts.level).to_string(),
        variant: opts.variant.clone(),
        seed: opts.seed,
        mean_psnr: per_image.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_noisy_psnr: per_image.iter().map(|r| r.noisy_psnr).sum::<f64>() / n,
        mean_aligned_mean_psnr: per_image.iter().map(|r| r.aligned_mean_psnr).sum::<f64>() / n,
        per_image,
        config: opts.config_echo.clone(),
        paper_reference_grayscale: PAPER_REF_GRAYSCALE[li],
        paper_reference_color: PAPER_REF_COLOR[li],
    })
}

/// Evaluate a trained model on every image of a dataset directory: synthesize
/// a burst at the fixed level, run the forward pass, score PSNR against the
/// ground truth.
pub fn evaluate(model: &Model, flow_source: &FlowSource, dataset_dir: impl AsRef<Path>, opts: &EvalOptions) -> Result<EvalReport> {
    crate::util::enable_flush_to_zero();
    let dataset = load_dataset(dataset_dir, 16, opts.color)?;
    let denoiser = BilateralDenoiser::new();
    evaluate_with(
        |burst| {
            let out = model.forward(&burst.frames, &burst.params, &denoiser, flow_source)?;
            Ok(net::tensor_to_image(&out.pred)?)
        },
        &dataset,
        opts,
    )
}

/// Evaluate a checkpoint file (architecture recovered from its shapes).
pub fn evaluate_checkpoint(
    checkpoint_path: impl AsRef<Path>,
    dataset_dir: impl AsRef<Path>,
    level: NoiseMode,
    seed: u64,
    max_shift: f32,
    no_align: bool,
) -> Result<EvalReport> {
    let cp = Checkpoint::load(checkpoint_path.as_ref())?;
    let cfg = Model::config_from_checkpoint(&cp)?;
    let model = Model::from_checkpoint(&cp, cfg)?;
    let flow_source = if no_align { FlowSource::Identity } else { FlowSource::Estimate };
    let opts = EvalOptions {
        level,
        seed,
        burst_size: cfg.burst_size,
        max_shift,
        color: cfg.channels == 3,
        variant: if no_align { "no_align".into() } else { "full".into() },
        config_echo: serde_json::json!({
            "checkpoint": checkpoint_path.as_ref().display().to_string(),
            "burst_size": cfg.burst_size,
            "max_shift": max_shift,
        }),
    };
    evaluate(&model, &flow_source, dataset_dir, &opts)
}

/// Train a variant from scratch (one pipeline stage removed), then evaluate
/// it on `eval_dir`.
pub fn ablate(
    config: &TrainConfig,
    variant: AblationVariant,
    eval_dir: impl AsRef<Path>,
    level: NoiseMode,
    eval_seed: u64,
) -> Result<EvalReport> {
    let cfg = variant.apply(config);
    let outcome = train(&cfg)?;
    let opts = EvalOptions {
        level,
        seed: eval_seed,
        burst_size: cfg.burst_size,
        max_shift: cfg.max_shift,
        color: cfg.color,
        variant: cfg.variant_name().to_string(),
        config_echo: serde_json::to_value(&cfg).expect("config echo"),
    };
    evaluate(&outcome.model, &cfg.flow_source(), eval_dir, &opts)
}
