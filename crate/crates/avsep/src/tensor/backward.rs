//! Reverse-mode sweep. Node ids are assigned in construction order, so
//! descending id order is a valid reverse-topological order of the acyclic
//! graph. Intermediate gradients live in a scratch map for the duration of
//! one call; leaf variables accumulate into their persistent `.grad` slot.

use std::collections::{HashMap, HashSet};

use super::op::Op;
use super::rnn::gru_vjp;
use super::{gemm_nt, gemm_tn, ops, strides_of, Elem, Tensor};
use crate::error::{Error, Result};

impl<E: Elem> Tensor<E> {
    /// Backpropagates from a scalar node, accumulating gradients into every
    /// reachable leaf variable. Repeated calls accumulate additively until
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.shape()),
            });
        }
        // Collect every connected node reachable from the root.
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(node) = stack.pop() {
            if !seen.insert(node.id()) {
                continue;
            }
            node.0.op.visit_parents(|p| {
                if p.connected() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            });
            nodes.push(node);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for node in &nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if node.is_var() {
                node.accumulate_grad(&g);
            }
            apply_vjp(node, &g, &mut grads);
        }
        Ok(())
    }
}

/// Fetches (or zero-initializes) the scratch gradient for `parent` and runs
/// `f` on it. Skips parents that cannot route gradients to a variable.
fn with_grad<E: Elem>(
    grads: &mut HashMap<u64, Vec<E>>,
    parent: &Tensor<E>,
    f: impl FnOnce(&mut [E]),
) {
    if !parent.connected() {
        return;
    }
    let entry = grads
        .entry(parent.id())
        .or_insert_with(|| vec![E::zero(); parent.numel()]);
    f(entry);
}

fn apply_vjp<E: Elem>(node: &Tensor<E>, g: &[E], grads: &mut HashMap<u64, Vec<E>>) {
    let one = E::one();
    match &node.0.op {
        Op::None => {}
        Op::Add(a, b) => {
            with_grad(grads, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            with_grad(grads, b, |db| {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            });
        }
        Op::Sub(a, b) => {
            with_grad(grads, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            with_grad(grads, b, |db| {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            with_grad(grads, a, |da| {
                let bd = b.data();
                for i in 0..da.len() {
                    da[i] += g[i] * bd[i];
                }
            });
            with_grad(grads, b, |db| {
                let ad = a.data();
                for i in 0..db.len() {
                    db[i] += g[i] * ad[i];
                }
            });
        }
        Op::Div(a, b) => {
            with_grad(grads, a, |da| {
                let bd = b.data();
                for i in 0..da.len() {
                    da[i] += g[i] / bd[i];
                }
            });
            with_grad(grads, b, |db| {
                let y = node.data();
                let bd = b.data();
                for i in 0..db.len() {
                    db[i] -= g[i] * y[i] / bd[i];
                }
            });
        }
        Op::Neg(a) => with_grad(grads, a, |da| {
            for (d, &gv) in da.iter_mut().zip(g) {
                *d -= gv;
            }
        }),
        Op::Scale(a, c) => {
            let c = *c;
            with_grad(grads, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            });
        }
        Op::AddScalar(a) => with_grad(grads, a, |da| {
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
        }),
        Op::Relu(a) => with_grad(grads, a, |da| {
            let ad = a.data();
            for i in 0..da.len() {
                if ad[i] > E::zero() {
                    da[i] += g[i];
                }
            }
        }),
        Op::Tanh(a) => with_grad(grads, a, |da| {
            let y = node.data();
            for i in 0..da.len() {
                da[i] += g[i] * (one - y[i] * y[i]);
            }
        }),
        Op::Sigmoid(a) => with_grad(grads, a, |da| {
            let y = node.data();
            for i in 0..da.len() {
                da[i] += g[i] * y[i] * (one - y[i]);
            }
        }),
        Op::Exp(a) => with_grad(grads, a, |da| {
            let y = node.data();
            for i in 0..da.len() {
                da[i] += g[i] * y[i];
            }
        }),
        Op::Ln(a) => with_grad(grads, a, |da| {
            let ad = a.data();
            for i in 0..da.len() {
                da[i] += g[i] / ad[i];
            }
        }),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            with_grad(grads, a, |da| {
                let ad = a.data();
                for i in 0..da.len() {
                    // Saturated entries are excluded from gradient flow.
                    if ad[i] > lo && ad[i] < hi {
                        da[i] += g[i];
                    }
                }
            });
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            with_grad(grads, a, |da| {
                gemm_nt(m, n, k, one, g, &b.data(), one, da);
            });
            with_grad(grads, b, |db| {
                gemm_tn(m, k, n, one, &a.data(), g, one, db);
            });
        }
        Op::AddRowBias(x, bias) => {
            with_grad(grads, x, |dx| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            let d = bias.numel();
            with_grad(grads, bias, |db| {
                for row in g.chunks_exact(d) {
                    for (j, &gv) in row.iter().enumerate() {
                        db[j] += gv;
                    }
                }
            });
        }
        Op::Conv1d { x, kernel, stride } => {
            let mut dx = vec![E::zero(); x.numel()];
            let mut dk = vec![E::zero(); kernel.numel()];
            ops::conv1d_vjp(x, kernel, *stride, g, Some(&mut dx), Some(&mut dk));
            with_grad(grads, x, |acc| {
                for (a, &b) in acc.iter_mut().zip(&dx) {
                    *a += b;
                }
            });
            with_grad(grads, kernel, |acc| {
                for (a, &b) in acc.iter_mut().zip(&dk) {
                    *a += b;
                }
            });
        }
        Op::ConvTranspose1d { x, kernel, stride } => {
            let mut dx = vec![E::zero(); x.numel()];
            let mut dk = vec![E::zero(); kernel.numel()];
            ops::conv_transpose1d_vjp(x, kernel, *stride, g, Some(&mut dx), Some(&mut dk));
            with_grad(grads, x, |acc| {
                for (a, &b) in acc.iter_mut().zip(&dx) {
                    *a += b;
                }
            });
            with_grad(grads, kernel, |acc| {
                for (a, &b) in acc.iter_mut().zip(&dk) {
                    *a += b;
                }
            });
        }
        Op::SumAll(a) => {
            let gv = g[0];
            with_grad(grads, a, |da| {
                for d in da.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::MeanAll(a) => {
            let gv = g[0] / E::of_f64(a.numel() as f64);
            with_grad(grads, a, |da| {
                for d in da.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::Softmax { x, axis } => {
            let shape = node.shape();
            let strides = strides_of(shape);
            let axis_len = shape[*axis];
            let axis_stride = strides[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            with_grad(grads, x, |dx| {
                let y = node.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * axis_stride + i;
                        let mut dot = E::zero();
                        for j in 0..axis_len {
                            let idx = base + j * axis_stride;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..axis_len {
                            let idx = base + j * axis_stride;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cache,
        } => {
            let d = gamma.numel();
            let rows = x.numel() / d;
            let dn = E::of_f64(d as f64);
            with_grad(grads, x, |dx| {
                let xd = x.data();
                let gd = gamma.data();
                for r in 0..rows {
                    let (mean, rstd) = cache[r];
                    let xrow = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..d {
                        let gy = grow[j] * gd[j];
                        let xhat = (xrow[j] - mean) * rstd;
                        m1 += gy;
                        m2 += gy * xhat;
                    }
                    m1 /= dn;
                    m2 /= dn;
                    let drow = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let gy = grow[j] * gd[j];
                        let xhat = (xrow[j] - mean) * rstd;
                        drow[j] += rstd * (gy - m1 - xhat * m2);
                    }
                }
            });
            with_grad(grads, gamma, |dg| {
                let xd = x.data();
                for r in 0..rows {
                    let (mean, rstd) = cache[r];
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mean) * rstd;
                        dg[j] += g[r * d + j] * xhat;
                    }
                }
            });
            with_grad(grads, beta, |db| {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            });
        }
        Op::Gru {
            x,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            reverse,
            cache,
        } => {
            let (dx, dwi, dwh, dbi, dbh) = gru_vjp(x, w_ih, w_hh, *reverse, cache, g);
            for (parent, local) in [(x, dx), (w_ih, dwi), (w_hh, dwh), (b_ih, dbi), (b_hh, dbh)] {
                with_grad(grads, parent, |acc| {
                    for (a, &b) in acc.iter_mut().zip(&local) {
                        *a += b;
                    }
                });
            }
        }
        Op::SpeakerAttn {
            q,
            k,
            v,
            present,
            weights,
        } => {
            let mut dq = vec![E::zero(); q.numel()];
            let mut dk = vec![E::zero(); k.numel()];
            let mut dv = vec![E::zero(); v.numel()];
            ops::speaker_attention_vjp(q, k, v, present, weights, g, &mut dq, &mut dk, &mut dv);
            for (parent, local) in [(q, dq), (k, dk), (v, dv)] {
                with_grad(grads, parent, |acc| {
                    for (a, &b) in acc.iter_mut().zip(&local) {
                        *a += b;
                    }
                });
            }
        }
        Op::Reshape(a) => with_grad(grads, a, |da| {
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
        }),
        Op::Permute { x, axes } => {
            // Output position -> input offset, same mapping as forward.
            let in_strides = strides_of(x.shape());
            let out_strides = strides_of(node.shape());
            with_grad(grads, x, |dx| {
                for (oi, &gv) in g.iter().enumerate() {
                    let mut rem = oi;
                    let mut src = 0usize;
                    for (d, &os) in out_strides.iter().enumerate() {
                        let idx = rem / os;
                        rem %= os;
                        src += idx * in_strides[axes[d]];
                    }
                    dx[src] += gv;
                }
            });
        }
        Op::Concat { xs, axis } => {
            let axis_total = node.shape()[*axis];
            let outer: usize = node.shape()[..*axis].iter().product();
            let inner: usize = node.shape()[*axis + 1..].iter().product();
            let mut offset = 0usize;
            for xpart in xs {
                let alen = xpart.shape()[*axis];
                with_grad(grads, xpart, |dx| {
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let dst = o * alen * inner;
                        for i in 0..alen * inner {
                            dx[dst + i] += g[src + i];
                        }
                    }
                });
                offset += alen;
            }
        }
        Op::Narrow { x, axis, start } => {
            let len = node.shape()[*axis];
            let axis_len = x.shape()[*axis];
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[*axis + 1..].iter().product();
            with_grad(grads, x, |dx| {
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        dx[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::RepeatRows { x, factor } => {
            let (t, d) = (x.shape()[0], x.shape()[1]);
            with_grad(grads, x, |dx| {
                for r in 0..t {
                    for rep in 0..*factor {
                        let src = (r * factor + rep) * d;
                        for j in 0..d {
                            dx[r * d + j] += g[src + j];
                        }
                    }
                }
            });
        }
        Op::Segment { x, chunk, hop } => {
            let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let n = node.shape()[1];
            with_grad(grads, x, |dx| {
                for bi in 0..b {
                    for ni in 0..n {
                        for j in 0..*chunk {
                            let p = ni * hop + j;
                            if p < *hop {
                                continue;
                            }
                            let ti = p - hop;
                            if ti >= t {
                                continue;
                            }
                            let src = ((bi * n + ni) * chunk + j) * d;
                            let dst = (bi * t + ti) * d;
                            for di in 0..d {
                                dx[dst + di] += g[src + di];
                            }
                        }
                    }
                }
            });
        }
        Op::Merge { x, hop, out_len } => {
            let (b, n, chunk, d) = (
                x.shape()[0],
                x.shape()[1],
                x.shape()[2],
                x.shape()[3],
            );
            // Recompute coverage; forward divided by it, so the gradient does
            // too.
            let mut cov = vec![0u32; *out_len];
            for ni in 0..n {
                for j in 0..chunk {
                    let p = ni * hop + j;
                    if p >= *hop && p - hop < *out_len {
                        cov[p - hop] += 1;
                    }
                }
            }
            let cov: Vec<E> = cov.into_iter().map(|c| E::of_f64(c as f64)).collect();
            with_grad(grads, x, |dx| {
                for bi in 0..b {
                    for ni in 0..n {
                        for j in 0..chunk {
                            let p = ni * hop + j;
                            if p < *hop {
                                continue;
                            }
                            let ti = p - hop;
                            if ti >= *out_len {
                                continue;
                            }
                            let src = (bi * out_len + ti) * d;
                            let dst = ((bi * n + ni) * chunk + j) * d;
                            for di in 0..d {
                                dx[dst + di] += g[src + di] / cov[ti];
                            }
                        }
                    }
                }
            });
        }
        Op::ScaleBy { x, s } => {
            let sv = s.data()[0];
            with_grad(grads, x, |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * sv;
                }
            });
            with_grad(grads, s, |ds| {
                let xd = x.data();
                let mut acc = E::zero();
                for i in 0..xd.len() {
                    acc += g[i] * xd[i];
                }
                ds[0] += acc;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{no_grad, Tensor};

    type T64 = Tensor<f64>;

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x^2 at x = 3 -> df/dx = 6.
        let x = T64::var_from_vec(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn gradients_accumulate_until_reset() {
        let x = T64::var_from_vec(vec![3.0], &[1]).unwrap();
        for _ in 0..2 {
            let y = x.mul(&x).unwrap();
            y.backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn chain_through_composite_expression() {
        // f(x) = sum(relu(x) * 2 + 1) on x = [-1, 2]: df/dx = [0, 2].
        let x = T64::var_from_vec(vec![-1.0, 2.0], &[2]).unwrap();
        let y = x.relu().scale(2.0).add_scalar(1.0).sum_all();
        assert_eq!(y.item(), 6.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // f(x) = x*x + x: df/dx = 2x + 1.
        let x = T64::var_from_vec(vec![4.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = T64::var_from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = T64::var_from_vec(vec![3.0], &[1]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap().sum_all());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn clamp_excludes_saturated_entries() {
        let x = T64::var_from_vec(vec![-100.0, 0.5, 100.0], &[3]).unwrap();
        let y = x.clamp(-60.0, 60.0).sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_values() {
        // f = sum(A @ B): dA = ones @ B^T (row sums of B per column),
        // dB = A^T @ ones.
        let a = T64::var_from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = T64::var_from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let y = a.matmul(&b).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }
}
