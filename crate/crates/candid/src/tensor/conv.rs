//! 2D convolution (cross-correlation) lowered to im2col + sgemm.

use super::{Backward, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of (k-1)/2; output keeps the input's spatial dims.
    Same,
    /// No padding; output shrinks by k-1 per axis.
    Valid,
}

/// Valid output range along one axis for a given kernel offset: outputs `o`
/// with `0 <= o + ko - pad < extent`, clipped to `0..out`.
fn valid_span(ko: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(ko);
    let hi = (extent + pad - ko).min(out);
    (lo, hi.max(lo))
}

fn im2col(input: &[f32], cin: usize, h: usize, w: usize, k: usize, pad: usize, hout: usize, wout: usize) -> Vec<f32> {
    let l = hout * wout;
    let mut cols = vec![0.0f32; cin * k * k * l];
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_span(ky, pad, h, hout);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_span(kx, pad, w, wout);
                if ox_hi == ox_lo {
                    continue;
                }
                let row = ((c * k + ky) * k + kx) * l;
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - pad;
                    let src = iy * w + ox_lo + kx - pad;
                    let dst = row + oy * wout + ox_lo;
                    cols[dst..dst + ox_hi - ox_lo].copy_from_slice(&plane[src..src + ox_hi - ox_lo]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, pad: usize, hout: usize, wout: usize) -> Vec<f32> {
    let l = hout * wout;
    let mut img = vec![0.0f32; cin * h * w];
    for c in 0..cin {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_span(ky, pad, h, hout);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_span(kx, pad, w, wout);
                if ox_hi == ox_lo {
                    continue;
                }
                let row = ((c * k + ky) * k + kx) * l;
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - pad;
                    let src = &cols[row + oy * wout + ox_lo..row + oy * wout + ox_hi];
                    let dst = &mut plane[iy * w + ox_lo + kx - pad..][..ox_hi - ox_lo];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    img
}

fn sgemm(m: usize, k: usize, n: usize, a: &[f32], rsa: isize, csa: isize, b: &[f32], rsb: isize, csb: isize, c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}

struct Conv2dBackward {
    cols: Vec<f32>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl Backward for Conv2dBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let (input, weights, bias) = (&parents[0], &parents[1], &parents[2]);
        let cout = bias.len();
        let l = self.hout * self.wout;
        let kk = self.cin * self.k * self.k;
        if bias.requires_grad() {
            let mut gb = vec![0.0f32; cout];
            for (c, g) in gb.iter_mut().enumerate() {
                *g = grad_out[c * l..(c + 1) * l].iter().sum();
            }
            bias.accumulate_grad(&gb);
        }
        if weights.requires_grad() {
            // grad_W[Cout, K] = grad_out[Cout, L] * cols^T[L, K]
            let mut gw = vec![0.0f32; cout * kk];
            sgemm(cout, l, kk, grad_out, l as isize, 1, &self.cols, 1, l as isize, &mut gw);
            weights.accumulate_grad(&gw);
        }
        if input.requires_grad() {
            // grad_cols[K, L] = W^T[K, Cout] * grad_out[Cout, L]
            let wdata = weights.data();
            let mut gcols = vec![0.0f32; kk * l];
            sgemm(kk, cout, l, &wdata, 1, kk as isize, grad_out, l as isize, 1, &mut gcols);
            drop(wdata);
            let gin = col2im(&gcols, self.cin, self.h, self.w, self.k, self.pad, self.hout, self.wout);
            input.accumulate_grad(&gin);
        }
        Ok(())
    }
}

impl Tensor {
    /// Cross-correlation of `self` `[Cin, H, W]` with `weights`
    /// `[Cout, Cin, k, k]` plus `bias` `[Cout]`.
    pub fn conv2d(&self, weights: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
        let idims = self.dims();
        let wdims = weights.dims();
        let bdims = bias.dims();
        if idims.len() != 3 || wdims.len() != 4 || bdims.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "conv2d expects input [Cin,H,W], weights [Cout,Cin,k,k], bias [Cout]; got {idims:?}, {wdims:?}, {bdims:?}"
            )));
        }
        let (cin, h, w) = (idims[0], idims[1], idims[2]);
        let (cout, wcin, k, k2) = (wdims[0], wdims[1], wdims[2], wdims[3]);
        if k != k2 || wcin != cin || bdims[0] != cout {
            return Err(TensorError::DimMismatch { expected: vec![cout, cin, k, k], got: wdims });
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        let (pad, hout, wout) = match padding {
            Padding::Same => ((k - 1) / 2, h, w),
            Padding::Valid => {
                if h < k || w < k {
                    return Err(TensorError::InputTooSmall { input: h, input2: w, k });
                }
                (0, h - k + 1, w - k + 1)
            }
        };
        let l = hout * wout;
        let kk = cin * k * k;
        let cols = im2col(&self.data(), cin, h, w, k, pad, hout, wout);
        let mut out = vec![0.0f32; cout * l];
        {
            let wdata = weights.data();
            sgemm(cout, kk, l, &wdata, kk as isize, 1, &cols, l as isize, 1, &mut out);
        }
        {
            let bdata = bias.data();
            for c in 0..cout {
                let b = bdata[c];
                for v in &mut out[c * l..(c + 1) * l] {
                    *v += b;
                }
            }
        }
        let op = Conv2dBackward { cols, cin, h, w, k, pad, hout, wout };
        Tensor::from_op(
            vec![cout, hout, wout],
            out,
            vec![self.clone(), weights.clone(), bias.clone()],
            Box::new(op),
            "conv2d",
        )
    }
}
