//! Forward implementations of all graph ops, plus the VJP helpers for the
//! structured ops (conv, attention, chunking). Elementwise VJPs live in
//! `backward.rs` next to the dispatch.

use super::op::Op;
use super::{grad_enabled, strides_of, Elem, Tensor};
use crate::error::{Error, Result};

fn check_same_shape<E: Elem>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("add", self, other)?;
        let a = self.data();
        let b = other.data();
        let out: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("sub", self, other)?;
        let a = self.data();
        let b = other.data();
        let out: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("mul", self, other)?;
        let a = self.data();
        let b = other.data();
        let out: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("div", self, other)?;
        let a = self.data();
        let b = other.data();
        let out: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Div(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|&x| -x).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Neg(self.clone()))
    }

    pub fn scale(&self, factor: f64) -> Tensor<E> {
        let c = E::of_f64(factor);
        let out: Vec<E> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, value: f64) -> Tensor<E> {
        let c = E::of_f64(value);
        let out: Vec<E> = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::AddScalar(self.clone()))
    }

    pub fn relu(&self) -> Tensor<E> {
        let out: Vec<E> = self
            .data()
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Relu(self.clone()))
    }

    pub fn tanh(&self) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let one = E::one();
        let out: Vec<E> = self
            .data()
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Sigmoid(self.clone()))
    }

    pub fn exp(&self) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|&x| x.ln()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Ln(self.clone()))
    }

    /// Clamps to `[lo, hi]`. Gradients flow only through the strict interior;
    /// clamped entries are excluded from gradient flow.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<E> {
        let (lo, hi) = (E::of_f64(lo), E::of_f64(hi));
        let out: Vec<E> = self
            .data()
            .iter()
            .map(|&x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            })
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Clamp(self.clone(), lo, hi))
    }

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![E::zero(); m * n];
        super::gemm(m, k, n, E::one(), &self.data(), &other.data(), E::zero(), &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Adds a `[d]` bias vector to every trailing-dim row of `self`.
    pub fn add_row_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let d = *self.shape().last().ok_or(Error::Dimension {
            op: "add_row_bias",
            msg: "zero-rank tensor".into(),
        })?;
        if bias.ndim() != 1 || bias.shape()[0] != d {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let x = self.data();
        let b = bias.data();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            for (j, &v) in row.iter().enumerate() {
                out.push(v + b[j]);
            }
        }
        drop(x);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::AddRowBias(self.clone(), bias.clone()),
        ))
    }

    /// Affine map on the trailing dim: `x[..., din] @ w[din, dout] + b`.
    /// Leading axes are flattened and restored.
    pub fn linear(&self, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let din = *self.shape().last().ok_or(Error::Dimension {
            op: "linear",
            msg: "zero-rank input".into(),
        })?;
        if w.ndim() != 2 || w.shape()[0] != din {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let dout = w.shape()[1];
        let rows = self.numel() / din;
        let x2 = self.reshape(&[rows, din])?;
        let y = x2.matmul(w)?.add_row_bias(b)?;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        y.reshape(&out_shape)
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        Tensor::from_op(vec![1], vec![acc], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::of_f64(self.numel() as f64);
        let mut acc = E::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        Tensor::from_op(vec![1], vec![acc / n], Op::MeanAll(self.clone()))
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.ndim() {
            return Err(Error::Dimension {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, self.shape()),
            });
        }
        let shape = self.shape().to_vec();
        let strides = strides_of(&shape);
        let axis_len = shape[axis];
        let axis_stride = strides[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * axis_stride + i;
                let mut max = x[base];
                for j in 1..axis_len {
                    let v = x[base + j * axis_stride];
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = E::zero();
                for j in 0..axis_len {
                    let e = (x[base + j * axis_stride] - max).exp();
                    out[base + j * axis_stride] = e;
                    denom += e;
                }
                for j in 0..axis_len {
                    out[base + j * axis_stride] /= denom;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Softmax {
                x: self.clone(),
                axis,
            },
        ))
    }

    /// Layer normalization over the trailing dim with affine `gamma`/`beta`.
    /// Uses the population variance (divide by `d`).
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self.shape().last().ok_or(Error::Dimension {
            op: "layer_norm",
            msg: "zero-rank input".into(),
        })?;
        if gamma.ndim() != 1 || gamma.shape()[0] != d || beta.shape() != gamma.shape() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rec = grad_enabled()
            && (self.connected() || gamma.connected() || beta.connected());
        let eps = E::of_f64(eps);
        let dn = E::of_f64(d as f64);
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let rows = x.len() / d;
        let mut out = vec![E::zero(); x.len()];
        let mut cache = Vec::with_capacity(if rec { rows } else { 0 });
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = E::zero();
            for &v in row {
                mean += v;
            }
            mean /= dn;
            let mut var = E::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= dn;
            let rstd = E::one() / (var + eps).sqrt();
            if rec {
                cache.push((mean, rstd));
            }
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        let op = if rec {
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                cache,
            }
        } else {
            Op::None
        };
        Ok(Tensor::from_op(self.shape().to_vec(), out, op))
    }

    /// 1-D convolution: `x[cin, t]` with `kernel[cout, cin, l]` at `stride`,
    /// producing `[cout, floor((t-l)/stride)+1]`.
    pub fn conv1d(&self, kernel: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
        if self.ndim() != 2 || kernel.ndim() != 3 || kernel.shape()[1] != self.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Dimension {
                op: "conv1d",
                msg: "stride must be positive".into(),
            });
        }
        let (cin, t) = (self.shape()[0], self.shape()[1]);
        let (cout, l) = (kernel.shape()[0], kernel.shape()[2]);
        if t < l {
            return Err(Error::InputTooShort { needed: l, got: t });
        }
        let f = (t - l) / stride + 1;
        let x = self.data();
        let k = kernel.data();
        let mut out = vec![E::zero(); cout * f];
        for co in 0..cout {
            for ci in 0..cin {
                let krow = &k[(co * cin + ci) * l..(co * cin + ci + 1) * l];
                let xrow = &x[ci * t..(ci + 1) * t];
                for fi in 0..f {
                    let base = fi * stride;
                    let mut acc = E::zero();
                    for (j, &kv) in krow.iter().enumerate() {
                        acc += kv * xrow[base + j];
                    }
                    out[co * f + fi] += acc;
                }
            }
        }
        drop(x);
        drop(k);
        Ok(Tensor::from_op(
            vec![cout, f],
            out,
            Op::Conv1d {
                x: self.clone(),
                kernel: kernel.clone(),
                stride,
            },
        ))
    }

    /// Transposed 1-D convolution to a single output channel:
    /// `x[c, f]` with `kernel[c, l]` overlap-added at `stride`, producing
    /// `[(f-1)*stride + l]`.
    pub fn conv_transpose1d(&self, kernel: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
        if self.ndim() != 2 || kernel.ndim() != 2 || kernel.shape()[0] != self.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Dimension {
                op: "conv_transpose1d",
                msg: "stride must be positive".into(),
            });
        }
        let (c, f) = (self.shape()[0], self.shape()[1]);
        let l = kernel.shape()[1];
        let out_len = (f - 1) * stride + l;
        let x = self.data();
        let k = kernel.data();
        let mut out = vec![E::zero(); out_len];
        for ci in 0..c {
            let xrow = &x[ci * f..(ci + 1) * f];
            let krow = &k[ci * l..(ci + 1) * l];
            for (fi, &xv) in xrow.iter().enumerate() {
                let base = fi * stride;
                for (j, &kv) in krow.iter().enumerate() {
                    out[base + j] += xv * kv;
                }
            }
        }
        drop(x);
        drop(k);
        Ok(Tensor::from_op(
            vec![out_len],
            out,
            Op::ConvTranspose1d {
                x: self.clone(),
                kernel: kernel.clone(),
                stride,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Permutes axes (generalized transpose); produces a contiguous copy.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension {
                op: "permute",
                msg: format!("invalid axes {:?} for shape {:?}", axes, self.shape()),
            });
        }
        let in_shape = self.shape();
        let in_strides = strides_of(in_shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let out_strides = strides_of(&out_shape);
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        // Walk output positions in order; map each back to the input offset.
        let numel = x.len();
        for (oi, slot) in out.iter_mut().enumerate().take(numel) {
            let mut rem = oi;
            let mut src = 0usize;
            for (d, &os) in out_strides.iter().enumerate() {
                let idx = rem / os;
                rem %= os;
                src += idx * in_strides[axes[d]];
            }
            *slot = x[src];
        }
        drop(x);
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Permute {
                x: self.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    /// Slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                msg: format!(
                    "range {}..{} on axis {} out of bounds for shape {:?}",
                    start,
                    start + len,
                    axis,
                    self.shape()
                ),
            });
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        drop(x);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Narrow {
                x: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Repeats each row of a `[t, d]` tensor `factor` times -> `[t*factor, d]`
    /// (integer upsampling along the leading axis).
    pub fn repeat_rows(&self, factor: usize) -> Result<Tensor<E>> {
        if self.ndim() != 2 || factor == 0 {
            return Err(Error::Dimension {
                op: "repeat_rows",
                msg: format!("need 2-d input and factor >= 1, got {:?} x{}", self.shape(), factor),
            });
        }
        let (t, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = Vec::with_capacity(t * factor * d);
        for r in 0..t {
            let row = &x[r * d..(r + 1) * d];
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![t * factor, d],
            out,
            Op::RepeatRows {
                x: self.clone(),
                factor,
            },
        ))
    }

    /// Broadcast multiply by a single-element tensor.
    pub fn scale_by(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        if s.numel() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                msg: format!("scale factor must be a scalar, got {:?}", s.shape()),
            });
        }
        let sv = s.data()[0];
        let out: Vec<E> = self.data().iter().map(|&x| x * sv).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::ScaleBy {
                x: self.clone(),
                s: s.clone(),
            },
        ))
    }

    /// Overlapped chunking of `[b, t, d]` into `[b, n, chunk, d]` with a
    /// front pad of `hop` and a tail pad for alignment, so that every input
    /// position is covered and `merge_chunks` is an exact inverse.
    pub fn segment_chunks(&self, chunk: usize, hop: usize) -> Result<Tensor<E>> {
        if self.ndim() != 3 {
            return Err(Error::Dimension {
                op: "segment_chunks",
                msg: format!("need [b, t, d] input, got {:?}", self.shape()),
            });
        }
        if hop == 0 || chunk < hop {
            return Err(Error::Dimension {
                op: "segment_chunks",
                msg: format!("need 1 <= hop <= chunk, got chunk={} hop={}", chunk, hop),
            });
        }
        let (b, t, d) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = n_chunks(t, hop);
        let x = self.data();
        let mut out = vec![E::zero(); b * n * chunk * d];
        for bi in 0..b {
            for ni in 0..n {
                for j in 0..chunk {
                    // Padded coordinate ni*hop + j maps to input t = that - hop.
                    let p = ni * hop + j;
                    if p < hop {
                        continue;
                    }
                    let ti = p - hop;
                    if ti >= t {
                        continue;
                    }
                    let src = (bi * t + ti) * d;
                    let dst = ((bi * n + ni) * chunk + j) * d;
                    out[dst..dst + d].copy_from_slice(&x[src..src + d]);
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![b, n, chunk, d],
            out,
            Op::Segment {
                x: self.clone(),
                chunk,
                hop,
            },
        ))
    }

    /// Inverse of [`Tensor::segment_chunks`]: overlap-adds `[b, n, chunk, d]`
    /// back to `[b, out_len, d]`, dividing by the per-position coverage count
    /// (overlap-add weight normalization).
    pub fn merge_chunks(&self, hop: usize, out_len: usize) -> Result<Tensor<E>> {
        if self.ndim() != 4 {
            return Err(Error::Dimension {
                op: "merge_chunks",
                msg: format!("need [b, n, chunk, d] input, got {:?}", self.shape()),
            });
        }
        let (b, n, chunk, d) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if hop == 0 || chunk < hop {
            return Err(Error::Dimension {
                op: "merge_chunks",
                msg: format!("need 1 <= hop <= chunk, got chunk={} hop={}", chunk, hop),
            });
        }
        let coverage = coverage_counts::<E>(out_len, n, chunk, hop)?;
        let x = self.data();
        let mut out = vec![E::zero(); b * out_len * d];
        for bi in 0..b {
            for ni in 0..n {
                for j in 0..chunk {
                    let p = ni * hop + j;
                    if p < hop {
                        continue;
                    }
                    let ti = p - hop;
                    if ti >= out_len {
                        continue;
                    }
                    let src = ((bi * n + ni) * chunk + j) * d;
                    let dst = (bi * out_len + ti) * d;
                    for di in 0..d {
                        out[dst + di] += x[src + di];
                    }
                }
            }
        }
        drop(x);
        for ti in 0..out_len {
            let c = coverage[ti];
            for bi in 0..b {
                for di in 0..d {
                    out[(bi * out_len + ti) * d + di] /= c;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, out_len, d],
            out,
            Op::Merge {
                x: self.clone(),
                hop,
                out_len,
            },
        ))
    }

    /// Per-frame single-head attention over the speaker axis. `q`, `k`, `v`
    /// are `[s, t, d]`; scores are scaled by `1/sqrt(d)` and softmaxed over
    /// the present speakers only. Rows for absent speakers are zero in the
    /// output (callers splice the original embedding back in).
    pub fn speaker_attention(
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
        present: &[bool],
    ) -> Result<Tensor<E>> {
        check_same_shape("speaker_attention", q, k)?;
        check_same_shape("speaker_attention", q, v)?;
        if q.ndim() != 3 {
            return Err(Error::Dimension {
                op: "speaker_attention",
                msg: format!("need [s, t, d] inputs, got {:?}", q.shape()),
            });
        }
        let (s, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        if present.len() != s {
            return Err(Error::Dimension {
                op: "speaker_attention",
                msg: format!("presence mask has {} entries for {} speakers", present.len(), s),
            });
        }
        if !present.iter().any(|&p| p) {
            return Err(Error::Dimension {
                op: "speaker_attention",
                msg: "no speakers present".into(),
            });
        }
        let rec = grad_enabled() && (q.connected() || k.connected() || v.connected());
        let scale = E::one() / E::of_f64((d as f64).sqrt());
        let qd = q.data();
        let kd = k.data();
        let vd = v.data();
        let mut out = vec![E::zero(); s * t * d];
        let mut weights = vec![E::zero(); if rec { t * s * s } else { 0 }];
        let mut row = vec![E::zero(); s];
        for ti in 0..t {
            for i in 0..s {
                if !present[i] {
                    continue;
                }
                let qrow = &qd[(i * t + ti) * d..(i * t + ti + 1) * d];
                // Scores over present speakers, softmaxed with max subtraction.
                let mut max = E::neg_infinity();
                for (j, slot) in row.iter_mut().enumerate() {
                    if !present[j] {
                        *slot = E::neg_infinity();
                        continue;
                    }
                    let krow = &kd[(j * t + ti) * d..(j * t + ti + 1) * d];
                    let mut acc = E::zero();
                    for (a, b) in qrow.iter().zip(krow) {
                        acc += *a * *b;
                    }
                    *slot = acc * scale;
                    if *slot > max {
                        max = *slot;
                    }
                }
                let mut denom = E::zero();
                for slot in row.iter_mut() {
                    if slot.is_infinite() && *slot < E::zero() {
                        *slot = E::zero();
                    } else {
                        *slot = (*slot - max).exp();
                        denom += *slot;
                    }
                }
                let orow = &mut out[(i * t + ti) * d..(i * t + ti + 1) * d];
                for (j, slot) in row.iter_mut().enumerate() {
                    let w = *slot / denom;
                    *slot = w;
                    if w != E::zero() {
                        let vrow = &vd[(j * t + ti) * d..(j * t + ti + 1) * d];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
                if rec {
                    weights[(ti * s + i) * s..(ti * s + i + 1) * s].copy_from_slice(&row);
                }
            }
        }
        drop(qd);
        drop(kd);
        drop(vd);
        let op = if rec {
            Op::SpeakerAttn {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                present: present.to_vec(),
                weights,
            }
        } else {
            Op::None
        };
        Ok(Tensor::from_op(vec![s, t, d], out, op))
    }

    /// Concatenates tensors along `axis`. All other dims must match.
    pub fn concat(xs: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = xs.first().ok_or(Error::Dimension {
            op: "concat",
            msg: "empty input list".into(),
        })?;
        if axis >= first.ndim() {
            return Err(Error::Dimension {
                op: "concat",
                msg: format!("axis {} out of range for shape {:?}", axis, first.shape()),
            });
        }
        let mut axis_total = 0usize;
        for x in xs {
            if x.ndim() != first.ndim()
                || x.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            axis_total += x.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![E::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for x in xs {
            let alen = x.shape()[axis];
            let xd = x.data();
            for o in 0..outer {
                let src = o * alen * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + alen * inner].copy_from_slice(&xd[src..src + alen * inner]);
            }
            offset += alen;
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(xs: &[Tensor<E>]) -> Result<Tensor<E>> {
        let first = xs.first().ok_or(Error::Dimension {
            op: "stack",
            msg: "empty input list".into(),
        })?;
        let mut unit_shape = vec![1usize];
        unit_shape.extend_from_slice(first.shape());
        let reshaped: Vec<Tensor<E>> = xs
            .iter()
            .map(|x| x.reshape(&unit_shape))
            .collect::<Result<_>>()?;
        Tensor::concat(&reshaped, 0)
    }

    /// Inner product of two equal-shape tensors as a `[1]` tensor.
    pub fn dot(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.mul(other)?.sum_all())
    }

    /// Bidirectional gated recurrent layer over `[b, t, din]`, concatenating
    /// forward and backward hidden states -> `[b, t, 2h]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_bidir(
        &self,
        w_ih_f: &Tensor<E>,
        w_hh_f: &Tensor<E>,
        b_ih_f: &Tensor<E>,
        b_hh_f: &Tensor<E>,
        w_ih_b: &Tensor<E>,
        w_hh_b: &Tensor<E>,
        b_ih_b: &Tensor<E>,
        b_hh_b: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let fwd = self.gru(w_ih_f, w_hh_f, b_ih_f, b_hh_f, false)?;
        let bwd = self.gru(w_ih_b, w_hh_b, b_ih_b, b_hh_b, true)?;
        Tensor::concat(&[fwd, bwd], 2)
    }
}

/// Number of chunks produced by `segment_chunks` for input length `t`:
/// front pad of `hop`, tail pad to the next hop boundary.
pub fn n_chunks(t: usize, hop: usize) -> usize {
    let rest = (hop - t % hop) % hop;
    (t + rest) / hop + 1
}

/// Per-position coverage counts of the chunk grid over `out_len` positions.
/// Errors if any position is uncovered (merge would be ill-defined).
fn coverage_counts<E: Elem>(out_len: usize, n: usize, chunk: usize, hop: usize) -> Result<Vec<E>> {
    let mut cov = vec![0u32; out_len];
    for ni in 0..n {
        for j in 0..chunk {
            let p = ni * hop + j;
            if p < hop {
                continue;
            }
            let ti = p - hop;
            if ti < out_len {
                cov[ti] += 1;
            }
        }
    }
    if let Some(pos) = cov.iter().position(|&c| c == 0) {
        return Err(Error::Dimension {
            op: "merge_chunks",
            msg: format!(
                "position {} uncovered by chunk grid (n={}, chunk={}, hop={}, out_len={})",
                pos, n, chunk, hop, out_len
            ),
        });
    }
    Ok(cov.into_iter().map(|c| E::of_f64(c as f64)).collect())
}

// ---- VJP helpers for the structured ops -----------------------------------

pub(crate) fn conv1d_vjp<E: Elem>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    g: &[E],
    dx: Option<&mut [E]>,
    dk: Option<&mut [E]>,
) {
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, l) = (kernel.shape()[0], kernel.shape()[2]);
    let f = (t - l) / stride + 1;
    let xd = x.data();
    let kd = kernel.data();
    if let Some(dx) = dx {
        for co in 0..cout {
            for ci in 0..cin {
                let krow = &kd[(co * cin + ci) * l..(co * cin + ci + 1) * l];
                for fi in 0..f {
                    let gv = g[co * f + fi];
                    if gv == E::zero() {
                        continue;
                    }
                    let base = ci * t + fi * stride;
                    for (j, &kv) in krow.iter().enumerate() {
                        dx[base + j] += gv * kv;
                    }
                }
            }
        }
    }
    if let Some(dk) = dk {
        for co in 0..cout {
            for ci in 0..cin {
                let xrow = &xd[ci * t..(ci + 1) * t];
                let base = (co * cin + ci) * l;
                for fi in 0..f {
                    let gv = g[co * f + fi];
                    if gv == E::zero() {
                        continue;
                    }
                    let xoff = fi * stride;
                    for j in 0..l {
                        dk[base + j] += gv * xrow[xoff + j];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose1d_vjp<E: Elem>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    g: &[E],
    dx: Option<&mut [E]>,
    dk: Option<&mut [E]>,
) {
    let (c, f) = (x.shape()[0], x.shape()[1]);
    let l = kernel.shape()[1];
    let xd = x.data();
    let kd = kernel.data();
    if let Some(dx) = dx {
        for ci in 0..c {
            let krow = &kd[ci * l..(ci + 1) * l];
            for fi in 0..f {
                let base = fi * stride;
                let mut acc = E::zero();
                for (j, &kv) in krow.iter().enumerate() {
                    acc += kv * g[base + j];
                }
                dx[ci * f + fi] += acc;
            }
        }
    }
    if let Some(dk) = dk {
        for ci in 0..c {
            let xrow = &xd[ci * f..(ci + 1) * f];
            let base = ci * l;
            for (fi, &xv) in xrow.iter().enumerate() {
                let goff = fi * stride;
                for j in 0..l {
                    dk[base + j] += xv * g[goff + j];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn speaker_attention_vjp<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    present: &[bool],
    weights: &[E],
    g: &[E],
    dq: &mut [E],
    dk: &mut [E],
    dv: &mut [E],
) {
    let (s, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let scale = E::one() / E::of_f64((d as f64).sqrt());
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut dscore = vec![E::zero(); s];
    for ti in 0..t {
        for i in 0..s {
            if !present[i] {
                continue;
            }
            let grow = &g[(i * t + ti) * d..(i * t + ti + 1) * d];
            let wrow = &weights[(ti * s + i) * s..(ti * s + i + 1) * s];
            // dv[j] += w_ij * g_i; dw_ij = g_i . v_j
            let mut dwdot = vec![E::zero(); s];
            for j in 0..s {
                if !present[j] {
                    continue;
                }
                let w = wrow[j];
                let vrow = &vd[(j * t + ti) * d..(j * t + ti + 1) * d];
                let dvrow = &mut dv[(j * t + ti) * d..(j * t + ti + 1) * d];
                let mut acc = E::zero();
                for (di, (&gv, &vv)) in grow.iter().zip(vrow).enumerate() {
                    dvrow[di] += w * gv;
                    acc += gv * vv;
                }
                dwdot[j] = acc;
            }
            // Softmax VJP over the present row.
            let mut inner = E::zero();
            for j in 0..s {
                inner += wrow[j] * dwdot[j];
            }
            for j in 0..s {
                dscore[j] = wrow[j] * (dwdot[j] - inner);
            }
            // Scores were q_i . k_j * scale.
            let qrow = &qd[(i * t + ti) * d..(i * t + ti + 1) * d];
            let dqrow_base = (i * t + ti) * d;
            for j in 0..s {
                if !present[j] || dscore[j] == E::zero() {
                    continue;
                }
                let ds = dscore[j] * scale;
                let krow = &kd[(j * t + ti) * d..(j * t + ti + 1) * d];
                let dkrow = &mut dk[(j * t + ti) * d..(j * t + ti + 1) * d];
                for di in 0..d {
                    dq[dqrow_base + di] += ds * krow[di];
                    dkrow[di] += ds * qrow[di];
                }
            }
        }
    }
}
