//! The trainable heart of the pipeline: shared-weight feature extraction with
//! a noise channel, collaborative per-pixel kernel prediction and
//! application, and cross-stream fusion into the denoised output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::flow::{self, FlowError, FlowField};
use crate::imaging::Image;
use crate::noise::NoiseParams;
use crate::prefilter::{self, FrameDenoiser, PrefilterError};
use crate::tensor::{Backward, Padding, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Prefilter(#[from] PrefilterError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint/architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Architecture constants. All overridable through the training config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Burst size N.
    pub burst_size: usize,
    /// Image channels C (1 or 3).
    pub channels: usize,
    /// Number of processing streams (3, or 1 when pre-denoising is ablated).
    pub streams: usize,
    /// Hidden width of the feature extractor.
    pub feature_hidden: usize,
    /// Feature channels F emitted per frame.
    pub feature_channels: usize,
    /// Hidden width of the kernel-prediction CNN.
    pub kernel_hidden: usize,
    /// Hidden width of the fusion CNN.
    pub fusion_hidden: usize,
    /// When false the content-adaptive filter stage is skipped entirely and
    /// aligned images are fused directly.
    pub adaptive_filter: bool,
}

impl NetConfig {
    pub fn new(burst_size: usize, channels: usize) -> NetConfig {
        NetConfig {
            burst_size,
            channels,
            streams: 3,
            feature_hidden: 10,
            feature_channels: 5,
            kernel_hidden: 12,
            fusion_hidden: 10,
            adaptive_filter: true,
        }
    }

    /// Total spatially filtered images entering fusion.
    pub fn fused_images(&self) -> usize {
        self.streams * self.burst_size
    }

    fn fusion_in_channels(&self) -> usize {
        self.streams * self.burst_size * self.feature_channels + self.fused_images() * self.channels
    }
}

/// How flows are obtained during the forward pass.
pub enum FlowSource {
    /// Built-in pyramidal Lucas-Kanade, per stream on its own frames.
    Estimate,
    /// Zero flow everywhere (alignment ablated).
    Identity,
    /// Externally supplied fields (e.g. from `.flo` files), shared by all
    /// streams; entry i maps the reference to frame i+1.
    Given(Vec<FlowField>),
}

struct ConvLayer {
    name: String,
    weights: Tensor,
    bias: Tensor,
}

impl ConvLayer {
    fn init(name: &str, cout: usize, cin: usize, k: usize, zero: bool, rng: &mut ChaCha8Rng) -> ConvLayer {
        let n = cout * cin * k * k;
        let data = if zero {
            vec![0.0f32; n]
        } else {
            // He-uniform fan-in scaling
            let bound = (6.0 / (cin * k * k) as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        ConvLayer {
            name: name.to_string(),
            weights: Tensor::new(&[cout, cin, k, k], data, true).expect("init weights"),
            bias: Tensor::new(&[cout], vec![0.0; cout], true).expect("init bias"),
        }
    }

    fn forward(&self, x: &Tensor, relu: bool) -> Result<Tensor> {
        let y = x.conv2d(&self.weights, &self.bias, Padding::Same)?;
        Ok(if relu { y.relu()? } else { y })
    }
}

/// All trainable blocks; pre-filtering and flow estimation stay outside the
/// graph.
pub struct Model {
    pub cfg: NetConfig,
    features: Vec<ConvLayer>,
    kernels: Vec<ConvLayer>,
    fusion: Vec<ConvLayer>,
}

/// Output of a full forward pass, with the normalized intermediate volumes
/// exposed for inspection.
pub struct ForwardOutput {
    /// Denoised prediction, `[C, H, W]`, still attached to the graph.
    pub pred: Tensor,
    /// Per stream: softmax-normalized kernel volumes `[N,H,W,3,3]` and
    /// `[N,H,W,5,5]`. Empty when the adaptive filter is ablated.
    pub kernel_volumes: Vec<(Tensor, Tensor)>,
    /// Fusion weight volume `[M, C, H, W]`, softmax-normalized over M.
    pub weight_volume: Tensor,
}

impl Model {
    /// Fresh model with seeded He-uniform init; the final layers of the
    /// kernel and fusion CNNs start at zero so the initial forward pass is
    /// plain frame averaging.
    pub fn init(cfg: NetConfig, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let (fh, f) = (cfg.feature_hidden, cfg.feature_channels);
        let features = vec![
            ConvLayer::init("features.conv0", fh, c + 1, 3, false, &mut rng),
            ConvLayer::init("features.conv1", fh, fh, 3, false, &mut rng),
            ConvLayer::init("features.conv2", f, fh, 3, false, &mut rng),
        ];
        let kernels = if cfg.adaptive_filter {
            let kh = cfg.kernel_hidden;
            let nf = cfg.burst_size * f;
            vec![
                ConvLayer::init("kernels.conv0", kh, nf, 3, false, &mut rng),
                ConvLayer::init("kernels.conv1", kh, kh, 3, false, &mut rng),
                ConvLayer::init("kernels.conv2", kh, kh, 3, false, &mut rng),
                ConvLayer::init("kernels.conv3", cfg.burst_size * 34, kh, 3, true, &mut rng),
            ]
        } else {
            Vec::new()
        };
        let gh = cfg.fusion_hidden;
        let fusion = vec![
            ConvLayer::init("fusion.conv0", gh, cfg.fusion_in_channels(), 3, false, &mut rng),
            ConvLayer::init("fusion.conv1", gh, gh, 3, false, &mut rng),
            ConvLayer::init("fusion.conv2", gh, gh, 3, false, &mut rng),
            ConvLayer::init("fusion.conv3", cfg.fused_images() * c, gh, 3, true, &mut rng),
        ];
        Model { cfg, features, kernels, fusion }
    }

    /// Trainable parameters in canonical (checkpoint) order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for layer in self.features.iter().chain(&self.kernels).chain(&self.fusion) {
            out.push((format!("{}.w", layer.name), layer.weights.clone()));
            out.push((format!("{}.b", layer.name), layer.bias.clone()));
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cp = Checkpoint::default();
        for (name, t) in self.params() {
            cp.push(name, t.dims(), t.to_vec());
        }
        cp
    }

    /// Rebuild a model from checkpoint weights; `cfg` must describe the same
    /// architecture that produced them.
    pub fn from_checkpoint(cp: &Checkpoint, cfg: NetConfig) -> Result<Model> {
        let model = Model::init(cfg, 0);
        for (name, t) in model.params() {
            let e = cp.get(&name)?;
            if e.dims != t.dims() {
                return Err(NetError::ArchMismatch(format!("{name}: checkpoint {:?} vs model {:?}", e.dims, t.dims())));
            }
            t.set_data(&e.data)?;
        }
        Ok(model)
    }

    /// Recover the architecture from checkpoint entry shapes.
    pub fn config_from_checkpoint(cp: &Checkpoint) -> Result<NetConfig> {
        let f0 = cp.get("features.conv0.w")?;
        let f2 = cp.get("features.conv2.w")?;
        if f0.dims.len() != 4 || f2.dims.len() != 4 {
            return Err(NetError::ArchMismatch("malformed feature layer dims".into()));
        }
        let channels = f0.dims[1] - 1;
        let feature_hidden = f0.dims[0];
        let feature_channels = f2.dims[0];
        let adaptive = cp.get("kernels.conv0.w").is_ok();
        let (burst_size, kernel_hidden) = if adaptive {
            let k0 = cp.get("kernels.conv0.w")?;
            let k3 = cp.get("kernels.conv3.w")?;
            (k3.dims[0] / 34, k0.dims[0])
        } else {
            (0, 0)
        };
        let g0 = cp.get("fusion.conv0.w")?;
        let g3 = cp.get("fusion.conv3.w")?;
        let fused = g3.dims[0] / channels;
        let burst_size = if adaptive {
            burst_size
        } else {
            // fused = streams * N; recover N from the fusion input width
            let nf = g0.dims[1] - fused * channels;
            let per_stream_guess = nf / feature_channels;
            if fused % 3 == 0 && per_stream_guess == fused {
                fused / 3
            } else {
                fused
            }
        };
        let streams = if burst_size == 0 { 3 } else { fused / burst_size };
        let cfg = NetConfig {
            burst_size,
            channels,
            streams,
            feature_hidden,
            feature_channels,
            kernel_hidden: if adaptive { kernel_hidden } else { 12 },
            fusion_hidden: g0.dims[0],
            adaptive_filter: adaptive,
        };
        if cfg.burst_size == 0 || cfg.streams == 0 || fused != cfg.fused_images() {
            return Err(NetError::ArchMismatch(format!("inconsistent checkpoint shapes (fused={fused})")));
        }
        Ok(cfg)
    }

    /// Feature map `[F, H, W]` of one frame. The per-pixel noise level
    /// sqrt(sigma_r^2 + sigma_s^2 * y), with y the observed value, enters as
    /// an extra input channel. Weights are shared across frames and streams.
    pub fn extract_features(&self, img: &Image, params: &NoiseParams) -> Result<Tensor> {
        let x = image_with_noise_channel(img, params)?;
        let h1 = self.features[0].forward(&x, true)?;
        let h2 = self.features[1].forward(&h1, true)?;
        self.features[2].forward(&h2, false)
    }

    /// Collaborative kernel prediction from one stream's aligned feature
    /// stack: `[N,H,W,3,3]` and `[N,H,W,5,5]`, softmax-normalized per pixel.
    pub fn predict_kernels(&self, aligned_features: &[Tensor]) -> Result<(Tensor, Tensor)> {
        if !self.cfg.adaptive_filter {
            return Err(NetError::Invalid("adaptive filter is disabled in this model".into()));
        }
        let n = aligned_features.len();
        if n != self.cfg.burst_size {
            return Err(NetError::Invalid(format!("expected {} feature maps, got {n}", self.cfg.burst_size)));
        }
        let stack = Tensor::concat(aligned_features)?;
        let h1 = self.kernels[0].forward(&stack, true)?;
        let h2 = self.kernels[1].forward(&h1, true)?;
        let h3 = self.kernels[2].forward(&h2, true)?;
        let logits = self.kernels[3].forward(&h3, false)?;
        // [N*34, H, W]: per frame, channels 0..9 are the 3x3 taps and 9..34
        // the 5x5 taps, softmax-normalized per pixel and kernel size
        let k3 = kernel_softmax(&logits, n, 34, 0, 3)?;
        let k5 = kernel_softmax(&logits, n, 34, 9, 5)?;
        debug_assert!(kernel_sums_normalized(&k3) && kernel_sums_normalized(&k5));
        Ok((k3, k5))
    }

    /// Full pipeline: streams -> features -> align -> filter -> fuse.
    pub fn forward(
        &self,
        burst: &[Image],
        params: &NoiseParams,
        denoiser: &dyn FrameDenoiser,
        flow_source: &FlowSource,
    ) -> Result<ForwardOutput> {
        if burst.len() != self.cfg.burst_size {
            return Err(NetError::Invalid(format!(
                "model was built for burst size {}, got {}",
                self.cfg.burst_size,
                burst.len()
            )));
        }
        let streams: Vec<Vec<Image>> = if self.cfg.streams == 3 {
            let set = prefilter::make_streams(burst, *params, denoiser)?;
            vec![set.raw, set.mild, set.strong]
        } else {
            vec![burst.to_vec()]
        };
        // One flow estimate per burst, shared by every stream: the streams
        // are the same frames at different pre-filter strengths, so their
        // motion is identical, and the mildly pre-filtered copy is the most
        // reliable source (raw is noisy, strong washes out texture).
        let flow_frames = if streams.len() == 3 { &streams[1] } else { &streams[0] };
        let flows = match flow_source {
            FlowSource::Estimate => flow::estimate_burst_flows(flow_frames)?,
            FlowSource::Identity => flow::identity_burst_flows(flow_frames),
            FlowSource::Given(f) => f.clone(),
        };
        let mut all_features: Vec<Tensor> = Vec::new();
        let mut filtered: Vec<Tensor> = Vec::new();
        let mut kernel_volumes = Vec::new();
        for frames in &streams {
            let features: Vec<Tensor> = frames
                .iter()
                .map(|f| self.extract_features(f, params))
                .collect::<Result<_>>()?;
            let (aligned_frames, aligned_features) = flow::align_stream(frames, &features, &flows)?;
            let images = images_to_tensor(&aligned_frames)?;
            let stream_filtered = if self.cfg.adaptive_filter {
                let (k3, k5) = self.predict_kernels(&aligned_features)?;
                let f3 = apply_kernels(&images, &k3)?;
                let f5 = apply_kernels(&images, &k5)?;
                kernel_volumes.push((k3, k5));
                f3.add(&f5)?.scale(0.5)?
            } else {
                images
            };
            filtered.push(stream_filtered);
            all_features.extend(aligned_features);
        }
        let filtered = Tensor::concat(&filtered)?;
        let (pred, weight_volume) = self.fuse_tensors(&filtered, &all_features)?;
        Ok(ForwardOutput { pred, kernel_volumes, weight_volume })
    }

    /// Fusion: a 4-layer CNN over concatenated features + filtered images
    /// emits the weight volume `[M, C, H, W]`; softmax over the image
    /// dimension, then a weighted per-pixel sum.
    pub fn fuse_tensors(&self, filtered: &Tensor, all_features: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let fdims = filtered.dims();
        if fdims.len() != 4 {
            return Err(NetError::Invalid(format!("filtered stack must be [M,C,H,W], got {fdims:?}")));
        }
        let (m, c, h, w) = (fdims[0], fdims[1], fdims[2], fdims[3]);
        if m != self.cfg.fused_images() || c != self.cfg.channels {
            return Err(NetError::Invalid(format!(
                "fusion expects [{}, {}, ..], got [{m}, {c}, ..]",
                self.cfg.fused_images(),
                self.cfg.channels
            )));
        }
        let mut inputs: Vec<Tensor> = all_features.to_vec();
        inputs.push(filtered.reshape(&[m * c, h, w])?);
        let x = Tensor::concat(&inputs)?;
        let h1 = self.fusion[0].forward(&x, true)?;
        let h2 = self.fusion[1].forward(&h1, true)?;
        let h3 = self.fusion[2].forward(&h2, true)?;
        let logits = self.fusion[3].forward(&h3, false)?;
        let weights = logits.reshape(&[m, c, h, w])?.softmax(0)?;
        debug_assert!(weight_sums_normalized(&weights));
        let pred = weights.mul(filtered)?.sum_axis0()?;
        Ok((pred, weights))
    }
}

/// True when every per-pixel kernel is nonnegative and sums to 1 (±1e-5).
pub fn kernel_sums_normalized(vol: &Tensor) -> bool {
    let dims = vol.dims();
    let kk = dims[3] * dims[4];
    vol.data().chunks_exact(kk).all(|k| {
        let s: f32 = k.iter().sum();
        (s - 1.0).abs() <= 1e-5 && k.iter().all(|&v| v >= 0.0)
    })
}

/// True when fusion weights sum to 1 (±1e-5) over the image dimension.
pub fn weight_sums_normalized(vol: &Tensor) -> bool {
    let dims = vol.dims();
    let inner: usize = dims[1..].iter().product();
    let data = vol.data();
    (0..inner).all(|i| {
        let s: f32 = (0..dims[0]).map(|m_idx| data[m_idx * inner + i]).sum();
        (s - 1.0).abs() <= 1e-5
    })
}

/// Constant `[C, H, W]` tensor from an image.
pub fn image_to_tensor(img: &Image) -> Result<Tensor> {
    Ok(Tensor::new(&[img.channels(), img.height(), img.width()], img.data().to_vec(), false)?)
}

/// Constant `[N, C, H, W]` tensor from a stack of same-shaped images.
pub fn images_to_tensor(frames: &[Image]) -> Result<Tensor> {
    let first = &frames[0];
    let mut data = Vec::with_capacity(frames.len() * first.data().len());
    for f in frames {
        if !f.same_dims(first) {
            return Err(NetError::Invalid("frames differ in shape".into()));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::new(
        &[frames.len(), first.channels(), first.height(), first.width()],
        data,
        false,
    )?)
}

/// `[C, H, W]` tensor (values clamped to [0,1]) back to an image.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(NetError::Invalid(format!("expected [C,H,W], got {dims:?}")));
    }
    let data: Vec<f32> = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Image::new(dims[1], dims[2], dims[0], data).map_err(|e| NetError::Invalid(e.to_string()))
}

pub fn image_with_noise_channel(img: &Image, params: &NoiseParams) -> Result<Tensor> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut data = Vec::with_capacity((c + 1) * h * w);
    data.extend_from_slice(img.data());
    if c == 1 {
        data.extend(img.data().iter().map(|&y| params.sigma_at(y)));
    } else {
        let luma = img.to_grayscale();
        data.extend(luma.data().iter().map(|&y| params.sigma_at(y)));
    }
    Ok(Tensor::new(&[c + 1, h, w], data, false)?)
}

// ---------------------------------------------------------------------------
// Fused per-pixel kernel softmax
// ---------------------------------------------------------------------------

struct KernelSoftmaxBackward {
    n: usize,
    per: usize,
    start: usize,
    kk: usize,
    hw: usize,
    /// Forward softmax outputs, needed for the Jacobian.
    output: Vec<f32>,
}

impl Backward for KernelSoftmaxBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> std::result::Result<(), TensorError> {
        let logits = &parents[0];
        if !logits.requires_grad() {
            return Ok(());
        }
        let (n, per, start, kk, hw) = (self.n, self.per, self.start, self.kk, self.hw);
        let mut g = vec![0.0f32; n * per * hw];
        for i in 0..n {
            for p in 0..hw {
                let base = (i * hw + p) * kk;
                let y = &self.output[base..base + kk];
                let go = &grad_out[base..base + kk];
                // dL/dz_t = y_t * (g_t - sum_j g_j y_j) along the softmax axis
                let dot: f32 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                for t in 0..kk {
                    g[(i * per + start + t) * hw + p] = y[t] * (go[t] - dot);
                }
            }
        }
        logits.accumulate_grad(&g);
        Ok(())
    }
}

/// Softmax-normalized per-pixel kernels straight from CNN logits.
///
/// `logits` is `[N*per, H, W]` with `per` channels per frame; taps
/// `start..start+k*k` of frame `i` live in channels `i*per+start..`. Returns
/// `[N, H, W, k, k]`. Equivalent to reshape + permute + slice + softmax, but
/// in one pass with one backward node; the op chain dominated the forward
/// cost of kernel prediction.
fn kernel_softmax(logits: &Tensor, n: usize, per: usize, start: usize, k: usize) -> Result<Tensor> {
    let dims = logits.dims();
    let kk = k * k;
    if dims.len() != 3 || dims[0] != n * per || start + kk > per {
        return Err(NetError::Invalid(format!(
            "kernel_softmax expects [{}*{per}, H, W] logits with taps {start}..{}, got {dims:?}",
            n,
            start + kk
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let hw = h * w;
    let src = logits.data();
    let mut out = vec![0.0f32; n * hw * kk];
    // gather channel planes into per-pixel contiguous tap vectors
    for i in 0..n {
        for t in 0..kk {
            let plane = &src[(i * per + start + t) * hw..(i * per + start + t + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(i * hw + p) * kk + t] = v;
            }
        }
    }
    drop(src);
    for px in out.chunks_exact_mut(kk) {
        let max = px.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f32;
        for v in px.iter_mut() {
            // floor keeps outputs strictly positive and comfortably normal;
            // e^-30 ~ 9e-14 is far below f32 resolution around the softmax
            // sum (~1), while much smaller outputs breed subnormal products
            // in the backward GEMMs, which stall x86 cores in microcode
            *v = (*v - max).max(-30.0).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in px.iter_mut() {
            *v *= inv;
        }
    }
    let op = KernelSoftmaxBackward { n, per, start, kk, hw, output: out.clone() };
    Ok(Tensor::from_op(vec![n, h, w, k, k], out, vec![logits.clone()], Box::new(op), "kernel_softmax")?)
}

// ---------------------------------------------------------------------------
// Per-pixel kernel application
// ---------------------------------------------------------------------------

struct ApplyKernelsBackward {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ApplyKernelsBackward {
    fn tap(&self, y: usize, x: usize, j: usize) -> (usize, usize) {
        let r = (self.k / 2) as i64;
        let dy = (j / self.k) as i64 - r;
        let dx = (j % self.k) as i64 - r;
        let cy = (y as i64 + dy).clamp(0, self.h as i64 - 1) as usize;
        let cx = (x as i64 + dx).clamp(0, self.w as i64 - 1) as usize;
        (cy, cx)
    }
}

impl Backward for ApplyKernelsBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> std::result::Result<(), TensorError> {
        let (images, kernels) = (&parents[0], &parents[1]);
        let (n, c, h, w, k) = (self.n, self.c, self.h, self.w, self.k);
        let kk = k * k;
        let hw = h * w;
        if images.requires_grad() {
            let kdata = kernels.data();
            let mut g = vec![0.0f32; n * c * hw];
            for ni in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let kbase = ((ni * h + y) * w + x) * kk;
                        for j in 0..kk {
                            let (cy, cx) = self.tap(y, x, j);
                            let kw = kdata[kbase + j];
                            for ci in 0..c {
                                g[(ni * c + ci) * hw + cy * w + cx] += kw * grad_out[(ni * c + ci) * hw + y * w + x];
                            }
                        }
                    }
                }
            }
            drop(kdata);
            images.accumulate_grad(&g);
        }
        if kernels.requires_grad() {
            let idata = images.data();
            let mut g = vec![0.0f32; n * hw * kk];
            for ni in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let kbase = ((ni * h + y) * w + x) * kk;
                        for j in 0..kk {
                            let (cy, cx) = self.tap(y, x, j);
                            let mut acc = 0.0f32;
                            for ci in 0..c {
                                acc += idata[(ni * c + ci) * hw + cy * w + cx] * grad_out[(ni * c + ci) * hw + y * w + x];
                            }
                            g[kbase + j] += acc;
                        }
                    }
                }
            }
            drop(idata);
            kernels.accumulate_grad(&g);
        }
        Ok(())
    }
}

/// Weighted average over each pixel's k x k neighborhood (clamp-to-edge),
/// with that pixel's own kernel. `images` is `[N, C, H, W]`, `kernels`
/// `[N, H, W, k, k]`; differentiable w.r.t. both.
pub fn apply_kernels(images: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let idims = images.dims();
    let kdims = kernels.dims();
    if idims.len() != 4 || kdims.len() != 5 || kdims[3] != kdims[4] {
        return Err(NetError::Invalid(format!(
            "apply_kernels expects images [N,C,H,W] and kernels [N,H,W,k,k]; got {idims:?}, {kdims:?}"
        )));
    }
    if kdims[0] != idims[0] || kdims[1] != idims[2] || kdims[2] != idims[3] {
        return Err(NetError::Invalid(format!("kernel volume {kdims:?} does not match images {idims:?}")));
    }
    let (n, c, h, w, k) = (idims[0], idims[1], idims[2], idims[3], kdims[3]);
    let kk = k * k;
    let hw = h * w;
    let op = ApplyKernelsBackward { n, c, h, w, k };
    let idata = images.data();
    let kdata = kernels.data();
    let mut out = vec![0.0f32; n * c * hw];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let kbase = ((ni * h + y) * w + x) * kk;
                for j in 0..kk {
                    let (cy, cx) = op.tap(y, x, j);
                    let kw = kdata[kbase + j];
                    for ci in 0..c {
                        out[(ni * c + ci) * hw + y * w + x] += kw * idata[(ni * c + ci) * hw + cy * w + cx];
                    }
                }
            }
        }
    }
    drop(idata);
    drop(kdata);
    Ok(Tensor::from_op(
        idims,
        out,
        vec![images.clone(), kernels.clone()],
        Box::new(op),
        "apply_kernels",
    )?)
}
