//! Heteroscedastic noise model and synthetic burst generation.
//!
//! Per-pixel noise is zero-mean Gaussian with variance
//! `sigma_r^2 + sigma_s^2 * x`, where `x` is the clean pixel value (readout
//! plus shot component). Results are clamped to [0, 1].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, Image};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("burst size must be >= 1")]
    EmptyBurst,
    #[error(transparent)]
    Image(#[from] imaging::ImageError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad burst directory {path}: {reason}")]
    BadBurstDir { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, NoiseError>;

/// Readout / shot noise standard deviations on the [0, 1] pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_r: f32,
    pub sigma_s: f32,
}

impl NoiseParams {
    pub fn new(sigma_r: f32, sigma_s: f32) -> NoiseParams {
        assert!(sigma_r > 0.0 && sigma_s > 0.0, "noise parameters must be positive");
        NoiseParams { sigma_r, sigma_s }
    }

    /// Per-pixel noise standard deviation at (observed or clean) value `x`.
    pub fn sigma_at(&self, x: f32) -> f32 {
        (self.sigma_r * self.sigma_r + self.sigma_s * self.sigma_s * x.max(0.0)).sqrt()
    }
}

/// How noise parameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// log10(sigma_r) ~ U[-3, -1.5], log10(sigma_s) ~ U[-4, -2].
    Train,
    /// Fixed (10^-2.2, 10^-2.6).
    EvalLvl1,
    /// Fixed (10^-1.8, 10^-2.2).
    EvalLvl2,
}

pub fn sample_noise_params(rng: &mut impl Rng, mode: NoiseMode) -> NoiseParams {
    match mode {
        NoiseMode::Train => {
            let ur = Uniform::new_inclusive(-3.0f32, -1.5).expect("range");
            let us = Uniform::new_inclusive(-4.0f32, -2.0).expect("range");
            let lr = ur.sample(rng);
            let ls = us.sample(rng);
            NoiseParams::new(10f32.powf(lr), 10f32.powf(ls))
        }
        NoiseMode::EvalLvl1 => NoiseParams::new(10f32.powf(-2.2), 10f32.powf(-2.6)),
        NoiseMode::EvalLvl2 => NoiseParams::new(10f32.powf(-1.8), 10f32.powf(-2.2)),
    }
}

/// Add heteroscedastic Gaussian noise and clamp to [0, 1].
pub fn add_noise(img: &Image, params: &NoiseParams, rng: &mut impl Rng) -> Image {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let data: Vec<f32> = img
        .data()
        .iter()
        .map(|&x| (x + normal.sample(rng) * params.sigma_at(x)).clamp(0.0, 1.0))
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data).expect("same shape")
}

/// Shifted noisy burst plus the ground truth it was made from.
#[derive(Debug, Clone)]
pub struct SyntheticBurst {
    /// Frame 0 is the reference, in ground-truth geometry.
    pub frames: Vec<Image>,
    pub params: NoiseParams,
    /// True (dx, dy) per frame; entry 0 is (0, 0).
    pub true_shifts: Vec<(f32, f32)>,
    pub ground_truth: Image,
}

/// Per-frame RNG streams are split deterministically from `seed`: stream 0
/// draws the shifts, stream 1+i the noise of frame i.
pub fn synthesize_burst(
    gt: &Image,
    n: usize,
    max_shift: f32,
    params: &NoiseParams,
    seed: u64,
) -> Result<SyntheticBurst> {
    if n < 1 {
        return Err(NoiseError::EmptyBurst);
    }
    assert!(max_shift >= 0.0);
    let mut shift_rng = stream_rng(seed, 0);
    let mut true_shifts = vec![(0.0f32, 0.0f32)];
    for _ in 1..n {
        let dx = shift_rng.random_range(-max_shift..=max_shift);
        let dy = shift_rng.random_range(-max_shift..=max_shift);
        true_shifts.push((dx, dy));
    }
    let mut frames = Vec::with_capacity(n);
    for (i, &(dx, dy)) in true_shifts.iter().enumerate() {
        let clean = if i == 0 { gt.clone() } else { imaging::shift_image(gt, dx, dy)? };
        let mut rng = stream_rng(seed, 1 + i as u64);
        frames.push(add_noise(&clean, params, &mut rng));
    }
    Ok(SyntheticBurst { frames, params: *params, true_shifts, ground_truth: gt.clone() })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `meta.json` of a burst directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BurstMeta {
    pub sigma_r: f32,
    pub sigma_s: f32,
    pub true_shifts: Vec<(f32, f32)>,
    pub seed: u64,
}

/// Write `frame_000.png .. frame_(N-1).png`, `gt.png` and `meta.json`.
pub fn write_burst_dir(burst: &SyntheticBurst, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| NoiseError::Io { path: dir.display().to_string(), source })?;
    for (i, frame) in burst.frames.iter().enumerate() {
        imaging::save_image(frame, dir.join(format!("frame_{i:03}.png")))?;
    }
    imaging::save_image(&burst.ground_truth, dir.join("gt.png"))?;
    let meta = BurstMeta {
        sigma_r: burst.params.sigma_r,
        sigma_s: burst.params.sigma_s,
        true_shifts: burst.true_shifts.clone(),
        seed,
    };
    let json = serde_json::to_vec_pretty(&meta).expect("serialize meta");
    crate::util::write_atomic(&dir.join("meta.json"), &json)
        .map_err(|source| NoiseError::Io { path: dir.display().to_string(), source })
}

/// Frames + metadata from a burst directory; `gt.png` is optional.
pub struct LoadedBurst {
    pub frames: Vec<Image>,
    pub meta: BurstMeta,
    pub ground_truth: Option<Image>,
}

pub fn read_burst_dir(dir: impl AsRef<Path>) -> Result<LoadedBurst> {
    let dir = dir.as_ref();
    let pstr = dir.display().to_string();
    let meta_bytes = std::fs::read(dir.join("meta.json"))
        .map_err(|source| NoiseError::Io { path: format!("{pstr}/meta.json"), source })?;
    let meta: BurstMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| NoiseError::BadBurstDir { path: pstr.clone(), reason: e.to_string() })?;
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("frame_{:03}.png", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(imaging::load_image(p)?);
    }
    if frames.is_empty() {
        return Err(NoiseError::BadBurstDir { path: pstr, reason: "no frame_*.png files".into() });
    }
    let gt_path = dir.join("gt.png");
    let ground_truth = if gt_path.exists() { Some(imaging::load_image(gt_path)?) } else { None };
    Ok(LoadedBurst { frames, meta, ground_truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::imaging::textured;

    #[test]
    fn eval_levels_match_fixed_parameters() {
        let mut rng = stream_rng(0, 0);
        let l1 = sample_noise_params(&mut rng, NoiseMode::EvalLvl1);
        assert_eq!(l1.sigma_r, 10f32.powf(-2.2));
        assert_eq!(l1.sigma_s, 10f32.powf(-2.6));
        let l2 = sample_noise_params(&mut rng, NoiseMode::EvalLvl2);
        assert_eq!(l2.sigma_r, 10f32.powf(-1.8));
        assert_eq!(l2.sigma_s, 10f32.powf(-2.2));
    }

    #[test]
    fn train_draws_stay_in_log_ranges_and_spread_uniformly() {
        let mut rng = stream_rng(1, 0);
        let mut hist_r = [0usize; 10];
        let mut hist_s = [0usize; 10];
        for _ in 0..10_000 {
            let p = sample_noise_params(&mut rng, NoiseMode::Train);
            let lr = p.sigma_r.log10();
            let ls = p.sigma_s.log10();
            assert!((-3.0..=-1.5).contains(&lr), "log10 sigma_r {lr}");
            assert!((-4.0..=-2.0).contains(&ls), "log10 sigma_s {ls}");
            hist_r[(((lr + 3.0) / 1.5 * 10.0) as usize).min(9)] += 1;
            hist_s[(((ls + 4.0) / 2.0 * 10.0) as usize).min(9)] += 1;
        }
        // chi-square against uniform, 9 dof; 27.9 is the 0.1% cutoff
        for hist in [hist_r, hist_s] {
            let chi2: f64 = hist.iter().map(|&o| (o as f64 - 1000.0).powi(2) / 1000.0).sum();
            assert!(chi2 < 27.9, "chi-square {chi2}, histogram {hist:?}");
        }
    }

    #[test]
    fn zero_noise_limit_is_identity() {
        let img = textured(8, 8, 2);
        let params = NoiseParams { sigma_r: 0.0, sigma_s: 0.0 };
        let noisy = add_noise(&img, &params, &mut stream_rng(3, 0));
        assert_eq!(noisy, img);
    }

    #[test]
    fn sample_variance_matches_model_at_half_gray() {
        for mode in [NoiseMode::EvalLvl1, NoiseMode::EvalLvl2] {
            let params = sample_noise_params(&mut stream_rng(0, 0), mode);
            let img = Image::new(250, 400, 1, vec![0.5; 100_000]).unwrap();
            let noisy = add_noise(&img, &params, &mut stream_rng(4, 0));
            let mean = noisy.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
            let var = noisy.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (1e5 - 1.0);
            let expect = (params.sigma_r as f64).powi(2) + (params.sigma_s as f64).powi(2) * 0.5;
            assert!((var - expect).abs() / expect < 0.05, "{mode:?}: var {var} vs {expect}");
            // zero-mean: sample mean within 3 standard errors of 0.5
            let se = expect.sqrt() / (1e5f64).sqrt();
            assert!((mean - 0.5).abs() < 3.0 * se, "{mode:?}: mean {mean}");
        }
    }

    #[test]
    fn variance_grows_with_intensity() {
        let params = NoiseParams::new(0.01, 0.1);
        let var_at = |x: f32, seed| {
            let img = Image::new(100, 100, 1, vec![x; 10_000]).unwrap();
            let noisy = add_noise(&img, &params, &mut stream_rng(seed, 0));
            let mean = noisy.data().iter().sum::<f32>() / 1e4;
            noisy.data().iter().map(|&v| (v - mean).powi(2)).sum::<f32>() / 9999.0
        };
        assert!(var_at(0.8, 5) > var_at(0.2, 6));
    }

    #[test]
    fn single_frame_burst() {
        let gt = textured(8, 8, 7);
        let b = synthesize_burst(&gt, 1, 3.0, &NoiseParams::new(0.05, 0.01), 1).unwrap();
        assert_eq!(b.frames.len(), 1);
        assert_eq!(b.true_shifts, vec![(0.0, 0.0)]);
        assert!(synthesize_burst(&gt, 0, 3.0, &NoiseParams::new(0.05, 0.01), 1).is_err());
    }

    #[test]
    fn zero_shift_burst_differs_only_in_noise() {
        let gt = textured(8, 8, 8);
        let b = synthesize_burst(&gt, 3, 0.0, &NoiseParams { sigma_r: 1e-9, sigma_s: 1e-9 }, 2).unwrap();
        for f in &b.frames {
            for (a, g) in f.data().iter().zip(gt.data()) {
                assert!((a - g).abs() < 1e-6);
            }
        }
        assert!(b.true_shifts.iter().all(|&s| s == (0.0, 0.0)));
    }

    /// Integer cross-correlation over lags in [-4, 4].
    fn best_integer_shift(reference: &Image, frame: &Image) -> (i64, i64) {
        let (h, w) = (reference.height() as i64, reference.width() as i64);
        let mut best = (0i64, 0i64);
        let mut best_score = f64::MIN;
        for dy in -4..=4i64 {
            for dx in -4..=4i64 {
                let mut score = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = (y - dy, x - dx);
                        if sy < 0 || sx < 0 || sy >= h || sx >= w {
                            continue;
                        }
                        score += (frame.get(0, y as usize, x as usize) as f64 - 0.5)
                            * (reference.get(0, sy as usize, sx as usize) as f64 - 0.5);
                    }
                }
                if score > best_score {
                    best_score = score;
                    best = (dx, dy);
                }
            }
        }
        best
    }

    #[test]
    fn shifts_recoverable_by_cross_correlation() {
        let gt = textured(32, 32, 9);
        let b = synthesize_burst(&gt, 4, 3.0, &NoiseParams::new(0.005, 0.005), 3).unwrap();
        for (i, &(dx, dy)) in b.true_shifts.iter().enumerate() {
            let (rx, ry) = best_integer_shift(&b.ground_truth, &b.frames[i]);
            assert!(
                (rx as f32 - dx).abs() <= 1.0 && (ry as f32 - dy).abs() <= 1.0,
                "frame {i}: recovered ({rx}, {ry}) vs true ({dx}, {dy})"
            );
        }
    }

    #[test]
    fn bursts_are_reproducible() {
        let gt = textured(12, 12, 10);
        let p = NoiseParams::new(0.02, 0.01);
        let a = synthesize_burst(&gt, 3, 2.0, &p, 77).unwrap();
        let b = synthesize_burst(&gt, 3, 2.0, &p, 77).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.true_shifts, b.true_shifts);
        let c = synthesize_burst(&gt, 3, 2.0, &p, 78).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn burst_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gt = textured(10, 10, 11);
        let b = synthesize_burst(&gt, 3, 2.0, &NoiseParams::new(0.02, 0.01), 5).unwrap();
        write_burst_dir(&b, dir.path(), 5).unwrap();
        let loaded = read_burst_dir(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), 3);
        assert_eq!(loaded.meta.seed, 5);
        assert_eq!(loaded.meta.true_shifts.len(), 3);
        assert!(loaded.ground_truth.is_some());
        // 8-bit quantization bound on the round trip
        for (a, b) in loaded.frames[0].data().iter().zip(b.frames[0].data()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn read_burst_dir_rejects_missing_meta() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_burst_dir(dir.path()).is_err());
    }
}
