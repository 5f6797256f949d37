//! Single-frame pre-denoising and the three processing streams.
//!
//! Every burst is duplicated into a raw stream and two pre-denoised streams
//! (mild / strong). The built-in denoiser is an edge-preserving bilateral
//! filter; any other single-frame denoiser can be plugged in behind
//! [`FrameDenoiser`], including outputs precomputed by an external model and
//! read back from disk.
//!
//! Prefiltered frames enter the training graph as constants; no gradient
//! ever propagates through this stage.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imaging::{self, Image};
use crate::noise::NoiseParams;

#[derive(Debug, Error)]
pub enum PrefilterError {
    #[error("empty burst")]
    EmptyBurst,
    #[error(transparent)]
    Image(#[from] imaging::ImageError),
    #[error("prefiltered frame {0} has mismatched dimensions")]
    DimMismatch(usize),
}

pub type Result<T> = std::result::Result<T, PrefilterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strength {
    /// Range std 10/255; keeps sharpness.
    Mild,
    /// Range std 30/255; smooths more aggressively.
    Strong,
}

/// Pluggable single-frame denoiser (frame in, frame out).
pub trait FrameDenoiser {
    /// `index` identifies the frame within its burst, for implementations
    /// that look results up externally.
    fn denoise(&self, img: &Image, strength: Strength, index: usize) -> Result<Image>;
}

const WINDOW_RADIUS: i64 = 2; // 5x5
const SPATIAL_STD: f32 = 1.5;
const RANGE_LUT_BINS: usize = 4096;

/// Built-in bilateral filter: 5x5 window, spatial std 1.5 px, range std
/// 10/255 (mild) or 30/255 (strong), clamp-to-edge.
pub struct BilateralDenoiser {
    spatial: [f32; 25],
    range_mild: Vec<f32>,
    range_strong: Vec<f32>,
}

impl Default for BilateralDenoiser {
    fn default() -> Self {
        Self::new()
    }
}

impl BilateralDenoiser {
    pub fn new() -> BilateralDenoiser {
        let mut spatial = [0.0f32; 25];
        for dy in -WINDOW_RADIUS..=WINDOW_RADIUS {
            for dx in -WINDOW_RADIUS..=WINDOW_RADIUS {
                let i = ((dy + WINDOW_RADIUS) * 5 + dx + WINDOW_RADIUS) as usize;
                spatial[i] = (-((dx * dx + dy * dy) as f32) / (2.0 * SPATIAL_STD * SPATIAL_STD)).exp();
            }
        }
        BilateralDenoiser {
            spatial,
            range_mild: range_lut(10.0 / 255.0),
            range_strong: range_lut(30.0 / 255.0),
        }
    }

    fn filter(&self, img: &Image, strength: Strength) -> Image {
        let lut = match strength {
            Strength::Mild => &self.range_mild,
            Strength::Strong => &self.range_strong,
        };
        let (h, w) = (img.height() as i64, img.width() as i64);
        let mut data = Vec::with_capacity(img.data().len());
        for c in 0..img.channels() {
            for y in 0..h {
                for x in 0..w {
                    let center = img.get(c, y as usize, x as usize);
                    let mut acc = 0.0f32;
                    let mut wsum = 0.0f32;
                    for dy in -WINDOW_RADIUS..=WINDOW_RADIUS {
                        let yy = (y + dy).clamp(0, h - 1) as usize;
                        for dx in -WINDOW_RADIUS..=WINDOW_RADIUS {
                            let xx = (x + dx).clamp(0, w - 1) as usize;
                            let v = img.get(c, yy, xx);
                            let si = ((dy + WINDOW_RADIUS) * 5 + dx + WINDOW_RADIUS) as usize;
                            let bin = ((v - center).abs() * (RANGE_LUT_BINS - 1) as f32) as usize;
                            let weight = self.spatial[si] * lut[bin];
                            acc += weight * v;
                            wsum += weight;
                        }
                    }
                    data.push(acc / wsum);
                }
            }
        }
        Image::new(img.height(), img.width(), img.channels(), data).expect("same shape")
    }
}

fn range_lut(sigma: f32) -> Vec<f32> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    (0..RANGE_LUT_BINS)
        .map(|i| {
            let d = i as f32 / (RANGE_LUT_BINS - 1) as f32;
            (-d * d * inv).exp()
        })
        .collect()
}

impl FrameDenoiser for BilateralDenoiser {
    fn denoise(&self, img: &Image, strength: Strength, _index: usize) -> Result<Image> {
        Ok(self.filter(img, strength))
    }
}

/// Prefiltered frames ingested from `<dir>/mild/` and `<dir>/strong/`,
/// matched by frame filename (`frame_000.png`, ...).
pub struct DirectoryDenoiser {
    root: PathBuf,
}

impl DirectoryDenoiser {
    pub fn new(root: impl AsRef<Path>) -> DirectoryDenoiser {
        DirectoryDenoiser { root: root.as_ref().to_path_buf() }
    }
}

impl FrameDenoiser for DirectoryDenoiser {
    fn denoise(&self, _img: &Image, strength: Strength, index: usize) -> Result<Image> {
        let sub = match strength {
            Strength::Mild => "mild",
            Strength::Strong => "strong",
        };
        Ok(imaging::load_image(self.root.join(sub).join(format!("frame_{index:03}.png")))?)
    }
}

/// The three parallel copies of one burst.
pub struct StreamSet {
    /// Bit-identical to the input burst.
    pub raw: Vec<Image>,
    pub mild: Vec<Image>,
    pub strong: Vec<Image>,
    pub params: NoiseParams,
}

impl StreamSet {
    pub fn streams(&self) -> [&Vec<Image>; 3] {
        [&self.raw, &self.mild, &self.strong]
    }
}

pub fn make_streams(burst: &[Image], params: NoiseParams, denoiser: &dyn FrameDenoiser) -> Result<StreamSet> {
    if burst.is_empty() {
        return Err(PrefilterError::EmptyBurst);
    }
    let mut mild = Vec::with_capacity(burst.len());
    let mut strong = Vec::with_capacity(burst.len());
    for (i, frame) in burst.iter().enumerate() {
        let m = denoiser.denoise(frame, Strength::Mild, i)?;
        let s = denoiser.denoise(frame, Strength::Strong, i)?;
        if !m.same_dims(frame) || !s.same_dims(frame) {
            return Err(PrefilterError::DimMismatch(i));
        }
        mild.push(m);
        strong.push(s);
    }
    Ok(StreamSet { raw: burst.to_vec(), mild, strong, params })
}

/// Convenience wrapper over the built-in bilateral denoiser.
pub fn prefilter_frame(img: &Image, strength: Strength) -> Image {
    BilateralDenoiser::new().filter(img, strength)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::textured;
    use crate::noise::{add_noise, sample_noise_params, NoiseMode, NoiseParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn variance(data: &[f32]) -> f32 {
        let mean = data.iter().sum::<f32>() / data.len() as f32;
        data.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / (data.len() - 1) as f32
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = Image::new(9, 9, 1, vec![0.42; 81]).unwrap();
        for strength in [Strength::Mild, Strength::Strong] {
            let out = prefilter_frame(&img, strength);
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn residual_variance_orders_by_strength() {
        let flat = Image::new(24, 24, 1, vec![0.5; 576]).unwrap();
        let params = NoiseParams { sigma_r: 0.05, sigma_s: 1e-6 };
        let noisy = add_noise(&flat, &params, &mut ChaCha8Rng::seed_from_u64(1));
        let res = |img: &Image| variance(&img.data().iter().map(|v| v - 0.5).collect::<Vec<_>>());
        let v_in = res(&noisy);
        let v_mild = res(&prefilter_frame(&noisy, Strength::Mild));
        let v_strong = res(&prefilter_frame(&noisy, Strength::Strong));
        assert!(v_strong < v_mild && v_mild < v_in, "{v_strong} < {v_mild} < {v_in}");
    }

    #[test]
    fn step_edge_preservation_orders_by_strength() {
        // vertical step of height 0.5
        let data: Vec<f32> = (0..16 * 16).map(|i| if i % 16 < 8 { 0.25 } else { 0.75 }).collect();
        let img = Image::new(16, 16, 1, data).unwrap();
        let edge = |img: &Image| (img.get(0, 8, 8) - img.get(0, 8, 7)).abs();
        let mild = edge(&prefilter_frame(&img, Strength::Mild));
        let strong = edge(&prefilter_frame(&img, Strength::Strong));
        assert!(mild >= 0.9 * 0.5, "mild keeps {mild} of a 0.5 edge");
        assert!(strong < mild);
    }

    #[test]
    fn streams_preserve_shape_and_raw_identity() {
        let gt = textured(10, 10, 1);
        let params = NoiseParams::new(0.02, 0.01);
        let burst = vec![gt.clone()];
        let set = make_streams(&burst, params, &BilateralDenoiser::new()).unwrap();
        assert_eq!(set.raw.len(), 1);
        assert_eq!(set.mild.len(), 1);
        assert_eq!(set.strong.len(), 1);
        assert_eq!(set.raw[0], gt);
        for s in set.streams() {
            assert!(s[0].same_dims(&gt));
        }
        assert!(make_streams(&[], params, &BilateralDenoiser::new()).is_err());
    }

    #[test]
    fn strong_beats_raw_on_flat_heavy_noise() {
        let flat = Image::new(32, 32, 1, vec![0.5; 1024]).unwrap();
        let params = sample_noise_params(&mut ChaCha8Rng::seed_from_u64(0), NoiseMode::EvalLvl2);
        let noisy = add_noise(&flat, &params, &mut ChaCha8Rng::seed_from_u64(2));
        let strong = prefilter_frame(&noisy, Strength::Strong);
        let p_raw = crate::imaging::psnr(&noisy, &flat).unwrap();
        let p_strong = crate::imaging::psnr(&strong, &flat).unwrap();
        assert!(p_strong > p_raw, "{p_strong} vs {p_raw}");
    }

    #[test]
    fn filtering_is_deterministic() {
        let img = textured(12, 12, 3);
        assert_eq!(prefilter_frame(&img, Strength::Mild), prefilter_frame(&img, Strength::Mild));
    }

    #[test]
    fn directory_denoiser_reads_matching_frames() {
        let dir = tempfile::tempdir().unwrap();
        let img = textured(8, 8, 4);
        std::fs::create_dir_all(dir.path().join("mild")).unwrap();
        std::fs::create_dir_all(dir.path().join("strong")).unwrap();
        crate::imaging::save_image(&img, dir.path().join("mild/frame_001.png")).unwrap();
        crate::imaging::save_image(&img, dir.path().join("strong/frame_001.png")).unwrap();
        let d = DirectoryDenoiser::new(dir.path());
        assert!(d.denoise(&img, Strength::Mild, 1).is_ok());
        assert!(d.denoise(&img, Strength::Strong, 1).is_ok());
        assert!(d.denoise(&img, Strength::Mild, 2).is_err());
    }
}
