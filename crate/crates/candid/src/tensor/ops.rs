//! Elementwise, shape and reduction operations with their backward rules.

use super::{Backward, Result, Tensor, TensorError};

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    let (da, db) = (a.dims(), b.dims());
    if da != db {
        return Err(TensorError::DimMismatch { expected: da, got: db });
    }
    Ok(())
}

struct AddBackward;
impl Backward for AddBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        parents[0].accumulate_grad(grad_out);
        parents[1].accumulate_grad(grad_out);
        Ok(())
    }
}

struct MulBackward;
impl Backward for MulBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        if parents[0].requires_grad() {
            let b = parents[1].data();
            let g: Vec<f32> = grad_out.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
            drop(b);
            parents[0].accumulate_grad(&g);
        }
        if parents[1].requires_grad() {
            let a = parents[0].data();
            let g: Vec<f32> = grad_out.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
            drop(a);
            parents[1].accumulate_grad(&g);
        }
        Ok(())
    }
}

struct ScaleBackward(f32);
impl Backward for ScaleBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let g: Vec<f32> = grad_out.iter().map(|g| g * self.0).collect();
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

struct ReluBackward;
impl Backward for ReluBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let x = parents[0].data();
        let g: Vec<f32> = grad_out
            .iter()
            .zip(x.iter())
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        drop(x);
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

struct PassthroughBackward;
impl Backward for PassthroughBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        parents[0].accumulate_grad(grad_out);
        Ok(())
    }
}

struct PermuteBackward {
    // forward mapping: out[i] = in[fwd[i]]
    fwd: Vec<usize>,
}
impl Backward for PermuteBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let mut g = vec![0.0f32; grad_out.len()];
        for (i, &src) in self.fwd.iter().enumerate() {
            g[src] += grad_out[i];
        }
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

struct SliceLastBackward {
    in_last: usize,
    start: usize,
    width: usize,
}
impl Backward for SliceLastBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let n: usize = parents[0].len();
        let mut g = vec![0.0f32; n];
        let outer = n / self.in_last;
        for o in 0..outer {
            let dst = &mut g[o * self.in_last + self.start..o * self.in_last + self.start + self.width];
            dst.copy_from_slice(&grad_out[o * self.width..(o + 1) * self.width]);
        }
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

struct ConcatBackward {
    sizes: Vec<usize>,
}
impl Backward for ConcatBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let mut off = 0;
        for (p, &sz) in parents.iter().zip(&self.sizes) {
            p.accumulate_grad(&grad_out[off..off + sz]);
            off += sz;
        }
        Ok(())
    }
}

struct SoftmaxBackward {
    output: Vec<f32>,
    outer: usize,
    axis_len: usize,
    inner: usize,
}
impl Backward for SoftmaxBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        // dL/dx_i = y_i * (g_i - sum_j g_j y_j) along the softmax axis
        let mut g = vec![0.0f32; grad_out.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.axis_len * self.inner + i;
                let mut dot = 0.0f32;
                for a in 0..self.axis_len {
                    let idx = base + a * self.inner;
                    dot += grad_out[idx] * self.output[idx];
                }
                for a in 0..self.axis_len {
                    let idx = base + a * self.inner;
                    g[idx] = self.output[idx] * (grad_out[idx] - dot);
                }
            }
        }
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

struct SumBackward;
impl Backward for SumBackward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let g = vec![grad_out[0]; parents[0].len()];
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

struct SumAxis0Backward {
    axis_len: usize,
    inner: usize,
}
impl Backward for SumAxis0Backward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let mut g = vec![0.0f32; self.axis_len * self.inner];
        for a in 0..self.axis_len {
            g[a * self.inner..(a + 1) * self.inner].copy_from_slice(grad_out);
        }
        parents[0].accumulate_grad(&g);
        Ok(())
    }
}

struct L1Backward {
    count: usize,
}
impl Backward for L1Backward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()> {
        let scale = grad_out[0] / self.count as f32;
        let pred = parents[0].data();
        let target = parents[1].data();
        let g: Vec<f32> = pred
            .iter()
            .zip(target.iter())
            .map(|(p, t)| {
                // zero at ties
                if p > t {
                    scale
                } else if p < t {
                    -scale
                } else {
                    0.0
                }
            })
            .collect();
        drop(pred);
        drop(target);
        parents[0].accumulate_grad(&g);
        if parents[1].requires_grad() {
            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
            parents[1].accumulate_grad(&neg);
        }
        Ok(())
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_dims(self, other)?;
        let a = self.data();
        let b = other.data();
        let data: Vec<f32> = a.iter().zip(b.iter()).map(|(a, b)| a + b).collect();
        drop(a);
        drop(b);
        Tensor::from_op(self.dims(), data, vec![self.clone(), other.clone()], Box::new(AddBackward), "add")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_dims(self, other)?;
        let a = self.data();
        let b = other.data();
        let data: Vec<f32> = a.iter().zip(b.iter()).map(|(a, b)| a * b).collect();
        drop(a);
        drop(b);
        Tensor::from_op(self.dims(), data, vec![self.clone(), other.clone()], Box::new(MulBackward), "mul")
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.dims(), data, vec![self.clone()], Box::new(ScaleBackward(c)), "scale")
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(self.dims(), data, vec![self.clone()], Box::new(ReluBackward), "relu")
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.len() {
            return Err(TensorError::LengthMismatch { len: self.len(), dims: dims.to_vec() });
        }
        Tensor::from_op(dims.to_vec(), self.to_vec(), vec![self.clone()], Box::new(PassthroughBackward), "reshape")
    }

    /// Reorder axes; `perm[i]` names the input axis placed at output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let dims = self.dims();
        if perm.len() != dims.len() {
            return Err(TensorError::Invalid(format!("permutation {perm:?} does not match rank {}", dims.len())));
        }
        let mut seen = vec![false; dims.len()];
        for &p in perm {
            if p >= dims.len() || seen[p] {
                return Err(TensorError::Invalid(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        // strides of the input
        let mut in_strides = vec![1usize; dims.len()];
        for i in (0..dims.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * dims[i + 1];
        }
        let n = self.len();
        let mut fwd = vec![0usize; n];
        let mut idx = vec![0usize; out_dims.len()];
        let src = self.data();
        let mut data = vec![0.0f32; n];
        for i in 0..n {
            let mut src_off = 0;
            for (d, &ix) in idx.iter().enumerate() {
                src_off += ix * in_strides[perm[d]];
            }
            data[i] = src[src_off];
            fwd[i] = src_off;
            // odometer increment over out_dims
            for d in (0..out_dims.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_dims[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        drop(src);
        Tensor::from_op(out_dims, data, vec![self.clone()], Box::new(PermuteBackward { fwd }), "permute")
    }

    /// Contiguous slice `[start, start+width)` along the last axis.
    pub fn slice_last(&self, start: usize, width: usize) -> Result<Tensor> {
        let dims = self.dims();
        let last = *dims.last().expect("rank >= 1");
        if start + width > last || width == 0 {
            return Err(TensorError::Invalid(format!("slice {start}..{} out of range for axis of {last}", start + width)));
        }
        let outer = self.len() / last;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            data.extend_from_slice(&src[o * last + start..o * last + start + width]);
        }
        drop(src);
        let mut out_dims = dims.clone();
        *out_dims.last_mut().unwrap() = width;
        Tensor::from_op(
            out_dims,
            data,
            vec![self.clone()],
            Box::new(SliceLastBackward { in_last: last, start, width }),
            "slice_last",
        )
    }

    /// Concatenate along axis 0; all trailing dims must agree.
    pub fn concat(tensors: &[Tensor]) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = tensors[0].dims();
        let tail = &first[1..];
        let mut axis0 = 0usize;
        for t in tensors {
            let d = t.dims();
            if &d[1..] != tail {
                return Err(TensorError::DimMismatch { expected: first.clone(), got: d });
            }
            axis0 += d[0];
        }
        let mut data = Vec::with_capacity(axis0 * tail.iter().product::<usize>());
        let mut sizes = Vec::with_capacity(tensors.len());
        for t in tensors {
            data.extend_from_slice(&t.data());
            sizes.push(t.len());
        }
        let mut out_dims = first.clone();
        out_dims[0] = axis0;
        Tensor::from_op(out_dims, data, tensors.to_vec(), Box::new(ConcatBackward { sizes }), "concat")
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let dims = self.dims();
        if axis >= dims.len() {
            return Err(TensorError::InvalidAxis { axis, dims });
        }
        let axis_len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let src = self.data();
        let mut data = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(src[base + a * inner]);
                }
                let mut sum = 0.0f32;
                for a in 0..axis_len {
                    // floor keeps outputs strictly positive and comfortably
                    // normal; e^-30 ~ 9e-14 is far below f32 resolution
                    // around the softmax sum (~1), while much smaller
                    // outputs breed subnormal products in backward GEMMs,
                    // which stall x86 cores in microcode
                    let e = (src[base + a * inner] - max).max(-30.0).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for a in 0..axis_len {
                    data[base + a * inner] *= inv;
                }
            }
        }
        drop(src);
        let op = SoftmaxBackward { output: data.clone(), outer, axis_len, inner };
        Tensor::from_op(dims, data, vec![self.clone()], Box::new(op), "softmax")
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f32 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], Box::new(SumBackward), "sum")
    }

    /// Sum over axis 0, collapsing `[A, rest...]` to `[rest...]`.
    pub fn sum_axis0(&self) -> Result<Tensor> {
        let dims = self.dims();
        if dims.len() < 2 {
            return Err(TensorError::InvalidAxis { axis: 0, dims });
        }
        let axis_len = dims[0];
        let inner: usize = dims[1..].iter().product();
        let src = self.data();
        let mut data = vec![0.0f32; inner];
        for a in 0..axis_len {
            for i in 0..inner {
                data[i] += src[a * inner + i];
            }
        }
        drop(src);
        Tensor::from_op(
            dims[1..].to_vec(),
            data,
            vec![self.clone()],
            Box::new(SumAxis0Backward { axis_len, inner }),
            "sum_axis0",
        )
    }

    /// Mean absolute difference, scalar. Gradient w.r.t. `pred` is
    /// sign(pred - target) / count, zero at exact ties.
    pub fn l1_loss(&self, target: &Tensor) -> Result<Tensor> {
        same_dims(self, target)?;
        let count = self.len();
        let pred = self.data();
        let tgt = target.data();
        let s: f32 = pred.iter().zip(tgt.iter()).map(|(p, t)| (p - t).abs()).sum();
        drop(pred);
        drop(tgt);
        Tensor::from_op(
            vec![1],
            vec![s / count as f32],
            vec![self.clone(), target.clone()],
            Box::new(L1Backward { count }),
            "l1_loss",
        )
    }
}
