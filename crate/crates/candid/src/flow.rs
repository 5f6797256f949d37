//! Dense optical flow estimation and backward warping.
//!
//! The built-in estimator is pyramidal Lucas-Kanade: 3 levels (factor 2 with
//! a 5x5 Gaussian antialias), a 5x5 integration window, 10 refinement
//! iterations per level and 1e-4 structure-tensor regularization on the
//! diagonal. It is fixed and deterministic; no gradient flows through it.
//! Externally computed fields can be supplied via the Middlebury `.flo`
//! format instead.
//!
//! `warp` samples the secondary frame at reference + flow (backward warping,
//! bilinear, clamp-to-edge) and IS differentiable w.r.t. the warped data; the
//! flow is treated as a constant.

use std::path::Path;

use thiserror::Error;

use crate::imaging::{self, Image};
use crate::tensor::{Backward, Tensor, TensorError};

pub const FLO_MAGIC: f32 = 202021.25;
const PYRAMID_LEVELS: usize = 3;
const WINDOW_RADIUS: i64 = 2; // 5x5 integration window
const ITERATIONS: usize = 10;
const DIAG_EPSILON: f32 = 1e-4;
// window gradient energy below which a pixel keeps the coarser estimate
const MIN_STRUCTURE: f32 = 1e-3;
const MIN_LEVEL_DIM: usize = 8;
// largest per-pixel update below which a refinement level is considered converged
const CONVERGED_STEP: f32 = 0.02;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("frame/feature count mismatch: {0} frames vs {1} feature stacks")]
    CountMismatch(usize, usize),
    #[error(transparent)]
    Image(#[from] imaging::ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad .flo data: {0}")]
    BadFlo(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Per-pixel displacement field: reference pixel (x, y) corresponds to
/// secondary location (x + dx, y + dy). Stored interleaved (dx, dy) row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<FlowField> {
        if data.len() != 2 * height * width {
            return Err(FlowError::BadFlo(format!("flow data length {} for {height}x{width}", data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(FlowError::BadFlo("non-finite flow vector".into()));
        }
        Ok(FlowField { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> FlowField {
        FlowField { height, width, data: vec![0.0; 2 * height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        let i = 2 * (y * self.width + x);
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }
}

// ---------------------------------------------------------------------------
// Pyramidal Lucas-Kanade
// ---------------------------------------------------------------------------

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f32>,
}

impl Plane {
    fn from_image(img: &Image) -> Plane {
        let g = img.to_grayscale();
        Plane { h: g.height(), w: g.width(), v: g.data().to_vec() }
    }

    fn at(&self, y: i64, x: i64) -> f32 {
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        self.v[y * self.w + x]
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        (self.v[y0 * self.w + x0] * (1.0 - fx) + self.v[y0 * self.w + x1] * fx) * (1.0 - fy)
            + (self.v[y1 * self.w + x0] * (1.0 - fx) + self.v[y1 * self.w + x1] * fx) * fy
    }

    /// 5x5 Gaussian antialias + decimate by 2.
    fn downsample(&self) -> Plane {
        let blurred = self.gauss5();
        let h = (self.h + 1) / 2;
        let w = (self.w + 1) / 2;
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push(blurred.v[(y * 2) * blurred.w + x * 2]);
            }
        }
        Plane { h, w, v }
    }

    fn gauss5(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0f32; self.h * self.w];
        for y in 0..self.h as i64 {
            for x in 0..self.w as i64 {
                let mut s = 0.0;
                for (i, k) in K.iter().enumerate() {
                    s += k * self.at(y, x + i as i64 - 2);
                }
                tmp[y as usize * self.w + x as usize] = s;
            }
        }
        let horiz = Plane { h: self.h, w: self.w, v: tmp };
        let mut v = vec![0.0f32; self.h * self.w];
        for y in 0..self.h as i64 {
            for x in 0..self.w as i64 {
                let mut s = 0.0;
                for (i, k) in K.iter().enumerate() {
                    s += k * horiz.at(y + i as i64 - 2, x);
                }
                v[y as usize * self.w + x as usize] = s;
            }
        }
        Plane { h: self.h, w: self.w, v }
    }
}

/// 5x5 box sums with clamp-to-edge, separable; the interior skips the clamp
/// arithmetic entirely (this runs five times per solver iteration).
fn window_sum(src: &[f32], h: usize, w: usize, out: &mut [f32], tmp: &mut [f32]) {
    let r = WINDOW_RADIUS as usize;
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let trow = &mut tmp[y * w..(y + 1) * w];
        if w > 2 * r {
            for x in 0..r {
                trow[x] = (-(r as i64)..=r as i64).map(|d| row[(x as i64 + d).clamp(0, w as i64 - 1) as usize]).sum();
            }
            for x in r..w - r {
                trow[x] = row[x - 2] + row[x - 1] + row[x] + row[x + 1] + row[x + 2];
            }
            for x in w - r..w {
                trow[x] = (-(r as i64)..=r as i64).map(|d| row[(x as i64 + d).clamp(0, w as i64 - 1) as usize]).sum();
            }
        } else {
            for x in 0..w {
                trow[x] = (-(r as i64)..=r as i64).map(|d| row[(x as i64 + d).clamp(0, w as i64 - 1) as usize]).sum();
            }
        }
    }
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        if y >= r && y + r < h {
            let (r0, r1, r2, r3, r4) = (
                &tmp[(y - 2) * w..(y - 1) * w],
                &tmp[(y - 1) * w..y * w],
                &tmp[y * w..(y + 1) * w],
                &tmp[(y + 1) * w..(y + 2) * w],
                &tmp[(y + 2) * w..(y + 3) * w],
            );
            for x in 0..w {
                orow[x] = r0[x] + r1[x] + r2[x] + r3[x] + r4[x];
            }
        } else {
            for x in 0..w {
                let mut s = 0.0;
                for d in -WINDOW_RADIUS..=WINDOW_RADIUS {
                    s += tmp[(y as i64 + d).clamp(0, h as i64 - 1) as usize * w + x];
                }
                orow[x] = s;
            }
        }
    }
}

fn refine_level(reference: &Plane, secondary: &Plane, flow: &mut FlowField) {
    let (h, w) = (reference.h, reference.w);
    let n = h * w;
    let mut warped = vec![0.0f32; n];
    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    let mut prod = vec![0.0f32; n];
    let mut tmp = vec![0.0f32; n];
    let mut sxx = vec![0.0f32; n];
    let mut sxy = vec![0.0f32; n];
    let mut syy = vec![0.0f32; n];
    let mut sxr = vec![0.0f32; n];
    let mut syr = vec![0.0f32; n];
    let mut valid = vec![0.0f32; n];
    let max_flow = (h.min(w) as f32) / 2.0;
    for _ in 0..ITERATIONS {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.get(y, x);
                let (sx, sy) = (x as f32 + dx, y as f32 + dy);
                warped[y * w + x] = secondary.sample(sx, sy);
                // Residuals of pixels whose sample clamps outside the frame
                // are meaningless; letting them into the window sums makes
                // border error creep inward by the window radius every
                // iteration and eventually destabilizes the whole field.
                valid[y * w + x] =
                    if sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f32 && sy <= (h - 1) as f32 { 1.0 } else { 0.0 };
            }
        }
        let wp = Plane { h, w, v: warped.clone() };
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = y as usize * w + x as usize;
                ix[i] = 0.5 * (wp.at(y, x + 1) - wp.at(y, x - 1));
                iy[i] = 0.5 * (wp.at(y + 1, x) - wp.at(y - 1, x));
            }
        }
        for i in 0..n {
            prod[i] = ix[i] * ix[i];
        }
        window_sum(&prod, h, w, &mut sxx, &mut tmp);
        for i in 0..n {
            prod[i] = ix[i] * iy[i];
        }
        window_sum(&prod, h, w, &mut sxy, &mut tmp);
        for i in 0..n {
            prod[i] = iy[i] * iy[i];
        }
        window_sum(&prod, h, w, &mut syy, &mut tmp);
        for i in 0..n {
            prod[i] = ix[i] * (warped[i] - reference.v[i]) * valid[i];
        }
        window_sum(&prod, h, w, &mut sxr, &mut tmp);
        for i in 0..n {
            prod[i] = iy[i] * (warped[i] - reference.v[i]) * valid[i];
        }
        window_sum(&prod, h, w, &mut syr, &mut tmp);
        let mut max_step = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let a = sxx[i] + DIAG_EPSILON;
                let b = sxy[i];
                let d = syy[i] + DIAG_EPSILON;
                let det = a * d - b * b;
                if det <= 0.0 || sxx[i] + syy[i] < MIN_STRUCTURE {
                    continue; // degenerate structure: keep the coarser estimate
                }
                // one-pixel step clamp: linearization is only trusted locally
                let du = (-(d * sxr[i] - b * syr[i]) / det).clamp(-1.0, 1.0);
                let dv = (-(a * syr[i] - b * sxr[i]) / det).clamp(-1.0, 1.0);
                max_step = max_step.max(du.abs()).max(dv.abs());
                let (fx, fy) = flow.get(y, x);
                flow.set(
                    y,
                    x,
                    (fx + du).clamp(-max_flow, max_flow),
                    (fy + dv).clamp(-max_flow, max_flow),
                );
            }
        }
        median_smooth(flow);
        if max_step < CONVERGED_STEP {
            break; // nothing moved appreciably; further iterations are no-ops
        }
    }
}

/// 3x3 component-wise median filter of the flow field (clamp-to-edge).
///
/// Per-pixel least-squares updates under a spatially varying warp are not
/// mutually consistent: outlier pixels (low-texture ridges, upsampled border
/// values) corrupt their neighbours' residual windows and the error compounds
/// across iterations. The median step removes such outliers each iteration,
/// which keeps long iteration runs stable instead of drifting past the optimum.
fn median_smooth(flow: &mut FlowField) {
    let (h, w) = (flow.height as i64, flow.width as i64);
    let src = flow.data.clone();
    let mut dx_win = [0.0f32; 9];
    let mut dy_win = [0.0f32; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for oy in -1..=1 {
                for ox in -1..=1 {
                    let sy = (y + oy).clamp(0, h - 1) as usize;
                    let sx = (x + ox).clamp(0, w - 1) as usize;
                    let i = 2 * (sy * w as usize + sx);
                    dx_win[k] = src[i];
                    dy_win[k] = src[i + 1];
                    k += 1;
                }
            }
            flow.set(y as usize, x as usize, median9(dx_win), median9(dy_win));
        }
    }
}

/// Median of 9 via a fixed exchange network (Paeth's 19-exchange network);
/// considerably cheaper than sorting in this per-pixel, per-iteration path.
fn median9(mut v: [f32; 9]) -> f32 {
    #[inline(always)]
    fn mm(v: &mut [f32; 9], a: usize, b: usize) {
        if v[a] > v[b] {
            v.swap(a, b);
        }
    }
    mm(&mut v, 1, 2);
    mm(&mut v, 4, 5);
    mm(&mut v, 7, 8);
    mm(&mut v, 0, 1);
    mm(&mut v, 3, 4);
    mm(&mut v, 6, 7);
    mm(&mut v, 1, 2);
    mm(&mut v, 4, 5);
    mm(&mut v, 7, 8);
    mm(&mut v, 0, 3);
    mm(&mut v, 5, 8);
    mm(&mut v, 4, 7);
    mm(&mut v, 3, 6);
    mm(&mut v, 1, 4);
    mm(&mut v, 2, 5);
    mm(&mut v, 4, 7);
    mm(&mut v, 4, 2);
    mm(&mut v, 6, 4);
    mm(&mut v, 4, 2);
    v[4]
}

fn upsample_flow(coarse: &FlowField, h: usize, w: usize) -> FlowField {
    let mut fine = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f32 / 2.0).min((coarse.width - 1) as f32);
            let cy = (y as f32 / 2.0).min((coarse.height - 1) as f32);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(coarse.width - 1);
            let y1 = (y0 + 1).min(coarse.height - 1);
            let fx = cx - x0 as f32;
            let fy = cy - y0 as f32;
            let lerp = |f: fn((f32, f32)) -> f32| {
                (f(coarse.get(y0, x0)) * (1.0 - fx) + f(coarse.get(y0, x1)) * fx) * (1.0 - fy)
                    + (f(coarse.get(y1, x0)) * (1.0 - fx) + f(coarse.get(y1, x1)) * fx) * fy
            };
            fine.set(y, x, 2.0 * lerp(|v| v.0), 2.0 * lerp(|v| v.1));
        }
    }
    fine
}

/// Dense flow from `reference` to `secondary` via pyramidal Lucas-Kanade.
pub fn estimate_flow(reference: &Image, secondary: &Image) -> Result<FlowField> {
    if !reference.same_dims(secondary) {
        return Err(FlowError::DimMismatch(reference.height(), reference.width(), secondary.height(), secondary.width()));
    }
    let mut ref_pyr = vec![Plane::from_image(reference)];
    let mut sec_pyr = vec![Plane::from_image(secondary)];
    while ref_pyr.len() < PYRAMID_LEVELS {
        let last = ref_pyr.last().unwrap();
        if last.h / 2 < MIN_LEVEL_DIM || last.w / 2 < MIN_LEVEL_DIM {
            break;
        }
        ref_pyr.push(ref_pyr.last().unwrap().downsample());
        sec_pyr.push(sec_pyr.last().unwrap().downsample());
    }
    let coarsest = ref_pyr.len() - 1;
    let mut flow = FlowField::zeros(ref_pyr[coarsest].h, ref_pyr[coarsest].w);
    for level in (0..=coarsest).rev() {
        if level != coarsest {
            flow = upsample_flow(&flow, ref_pyr[level].h, ref_pyr[level].w);
        }
        refine_level(&ref_pyr[level], &sec_pyr[level], &mut flow);
    }
    Ok(flow)
}

// ---------------------------------------------------------------------------
// Warping
// ---------------------------------------------------------------------------

/// Backward-warp an image into the reference geometry.
pub fn warp(secondary: &Image, flow: &FlowField) -> Result<Image> {
    if secondary.height() != flow.height || secondary.width() != flow.width {
        return Err(FlowError::DimMismatch(secondary.height(), secondary.width(), flow.height, flow.width));
    }
    let (h, w) = (flow.height, flow.width);
    let mut data = Vec::with_capacity(secondary.data().len());
    for c in 0..secondary.channels() {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.get(y, x);
                data.push(secondary.sample(c, x as f32 + dx, y as f32 + dy));
            }
        }
    }
    Ok(Image::new(h, w, secondary.channels(), data)?)
}

struct WarpBackward {
    // 4 (index, weight) taps per spatial pixel, shared by all channels
    taps: Vec<[(usize, f32); 4]>,
    hw: usize,
}

impl Backward for WarpBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> std::result::Result<(), TensorError> {
        let mut g = vec![0.0f32; parents[0].len()];
        let channels = g.len() / self.hw;
        for c in 0..channels {
            let base = c * self.hw;
            for (i, taps) in self.taps.iter().enumerate() {
                let go = grad_out[base + i];
                for &(idx, wgt) in taps {
                    g[base + idx] += go * wgt;
                }
            }
        }
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

/// Backward-warp a `[C, H, W]` feature tensor. Differentiable w.r.t. `data`;
/// the flow is a constant.
pub fn warp_tensor(data: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let dims = data.dims();
    if dims.len() != 3 || dims[1] != flow.height || dims[2] != flow.width {
        return Err(FlowError::DimMismatch(dims[1], dims[2], flow.height, flow.width));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let hw = h * w;
    let mut taps = Vec::with_capacity(hw);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.get(y, x);
            let sx = (x as f32 + dx).clamp(0.0, (w - 1) as f32);
            let sy = (y as f32 + dy).clamp(0.0, (h - 1) as f32);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            taps.push([
                (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * w + x1, fx * (1.0 - fy)),
                (y1 * w + x0, (1.0 - fx) * fy),
                (y1 * w + x1, fx * fy),
            ]);
        }
    }
    let src = data.to_vec();
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        let base = ch * hw;
        for (i, t) in taps.iter().enumerate() {
            out[base + i] = t.iter().map(|&(idx, wgt)| src[base + idx] * wgt).sum();
        }
    }
    Ok(Tensor::from_op(dims, out, vec![data.clone()], Box::new(WarpBackward { taps, hw }), "warp")?)
}

/// Flows from the reference (frame 0) to each secondary frame; entry i
/// corresponds to frame i+1.
pub fn estimate_burst_flows(frames: &[Image]) -> Result<Vec<FlowField>> {
    frames[1..].iter().map(|f| estimate_flow(&frames[0], f)).collect()
}

pub fn identity_burst_flows(frames: &[Image]) -> Vec<FlowField> {
    frames[1..].iter().map(|f| FlowField::zeros(f.height(), f.width())).collect()
}

/// Warp every secondary frame and its feature stack into the reference
/// geometry. Frame 0 passes through untouched.
pub fn align_stream(
    frames: &[Image],
    features: &[Tensor],
    flows: &[FlowField],
) -> Result<(Vec<Image>, Vec<Tensor>)> {
    if frames.len() != features.len() {
        return Err(FlowError::CountMismatch(frames.len(), features.len()));
    }
    if flows.len() + 1 != frames.len() {
        return Err(FlowError::CountMismatch(frames.len(), flows.len() + 1));
    }
    let mut out_frames = vec![frames[0].clone()];
    let mut out_features = vec![features[0].clone()];
    for (i, flow) in flows.iter().enumerate() {
        out_frames.push(warp(&frames[i + 1], flow)?);
        out_features.push(warp_tensor(&features[i + 1], flow)?);
    }
    Ok((out_frames, out_features))
}

// ---------------------------------------------------------------------------
// Middlebury .flo I/O
// ---------------------------------------------------------------------------

/// Parse a Middlebury `.flo` buffer: magic float 202021.25, width/height as
/// 32-bit LE ints, then interleaved (dx, dy) 32-bit LE floats.
pub fn decode_flo(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(format!("bad magic {magic}"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(format!("bad dimensions {width}x{height}"));
    }
    let (width, height) = (width as usize, height as usize);
    let n = 2 * width * height;
    let body = &bytes[12..];
    if body.len() < n * 4 {
        return Err("truncated flow data".into());
    }
    let data: Vec<f32> = body[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FlowField::new(height, width, data).map_err(|e| e.to_string())
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FlowError::Io { path: path.display().to_string(), source })?;
    decode_flo(&bytes).map_err(FlowError::BadFlo)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::util::write_atomic(path, &encode_flo(flow))
        .map_err(|source| FlowError::Io { path: path.display().to_string(), source })
}

/// Load `flow_001.flo .. flow_NNN.flo` from a directory, one field per
/// non-reference frame. All `n_flows` files must be present.
pub fn read_flow_dir(dir: impl AsRef<Path>, n_flows: usize) -> Result<Vec<FlowField>> {
    (1..=n_flows).map(|i| read_flo(dir.as_ref().join(format!("flow_{i:03}.flo")))).collect()
}
