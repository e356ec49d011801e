//! Fused gated recurrent layer. The whole sequence is one graph node: the
//! forward pass stores gate activations and the backward pass runs
//! backpropagation-through-time internally, which keeps the graph small and
//! lets the input-side matmuls batch over all steps.
//!
//! Cell equations (gate order `[r | z | n]` along the `3h` axis):
//!   r_t = sigmoid(W_ir x_t + b_ir + W_hr h_{t-1} + b_hr)
//!   z_t = sigmoid(W_iz x_t + b_iz + W_hz h_{t-1} + b_hz)
//!   n_t = tanh(W_in x_t + b_in + r_t * (W_hn h_{t-1} + b_hn))
//!   h_t = (1 - z_t) * n_t + z_t * h_{t-1}

use super::op::{GruCache, Op};
use super::{gemm, gemm_nt, gemm_tn, grad_enabled, Elem, Tensor};
use crate::error::{Error, Result};

impl<E: Elem> Tensor<E> {
    /// Single-direction gated recurrent layer over `[b, t, din]`, returning
    /// all hidden states `[b, t, h]`. `reverse` runs right-to-left (the
    /// output stays in natural time order). Initial state is zero.
    pub fn gru(
        &self,
        w_ih: &Tensor<E>,
        w_hh: &Tensor<E>,
        b_ih: &Tensor<E>,
        b_hh: &Tensor<E>,
        reverse: bool,
    ) -> Result<Tensor<E>> {
        if self.ndim() != 3 {
            return Err(Error::Dimension {
                op: "gru",
                msg: format!("need [b, t, din] input, got {:?}", self.shape()),
            });
        }
        let (b, t, din) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if w_ih.ndim() != 2 || w_ih.shape()[0] != din || w_ih.shape()[1] % 3 != 0 {
            return Err(Error::ShapeMismatch {
                op: "gru",
                lhs: self.shape().to_vec(),
                rhs: w_ih.shape().to_vec(),
            });
        }
        let h = w_ih.shape()[1] / 3;
        if w_hh.shape() != [h, 3 * h] {
            return Err(Error::ShapeMismatch {
                op: "gru",
                lhs: vec![h, 3 * h],
                rhs: w_hh.shape().to_vec(),
            });
        }
        if b_ih.shape() != [3 * h] || b_hh.shape() != [3 * h] {
            return Err(Error::ShapeMismatch {
                op: "gru",
                lhs: vec![3 * h],
                rhs: if b_ih.shape() != [3 * h] {
                    b_ih.shape().to_vec()
                } else {
                    b_hh.shape().to_vec()
                },
            });
        }
        let rec = grad_enabled()
            && (self.connected()
                || w_ih.connected()
                || w_hh.connected()
                || b_ih.connected()
                || b_hh.connected());

        let xd = self.data();
        let wih = w_ih.data();
        let whh = w_hh.data();
        let bih = b_ih.data();
        let bhh = b_hh.data();

        // Input-side gates for every step in one matmul: [b*t, 3h].
        let mut xg = vec![E::zero(); b * t * 3 * h];
        gemm(b * t, din, 3 * h, E::one(), &xd, &wih, E::zero(), &mut xg);
        for row in xg.chunks_exact_mut(3 * h) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += bih[j];
            }
        }

        let cache_len = if rec { b * t * h } else { 0 };
        let mut cache = GruCache {
            r: vec![E::zero(); cache_len],
            z: vec![E::zero(); cache_len],
            n: vec![E::zero(); cache_len],
            c: vec![E::zero(); cache_len],
            hprev: vec![E::zero(); cache_len],
        };

        let mut y = vec![E::zero(); b * t * h];
        let mut hbuf = vec![E::zero(); b * h];
        let mut hg = vec![E::zero(); b * 3 * h];
        let one = E::one();
        for step in 0..t {
            let time = if reverse { t - 1 - step } else { step };
            // hg = h @ w_hh + b_hh
            gemm(b, h, 3 * h, one, &hbuf, &whh, E::zero(), &mut hg);
            for bi in 0..b {
                let xrow = &xg[(bi * t + time) * 3 * h..(bi * t + time + 1) * 3 * h];
                let hrow = &mut hg[bi * 3 * h..(bi + 1) * 3 * h];
                let hold = &mut hbuf[bi * h..(bi + 1) * h];
                let ybase = (bi * t + time) * h;
                let cbase = if rec { (bi * t + time) * h } else { 0 };
                for j in 0..h {
                    let r = sigmoid(xrow[j] + hrow[j] + bhh[j]);
                    let z = sigmoid(xrow[h + j] + hrow[h + j] + bhh[h + j]);
                    let c = hrow[2 * h + j] + bhh[2 * h + j];
                    let n = (xrow[2 * h + j] + r * c).tanh();
                    let hnew = (one - z) * n + z * hold[j];
                    if rec {
                        cache.r[cbase + j] = r;
                        cache.z[cbase + j] = z;
                        cache.n[cbase + j] = n;
                        cache.c[cbase + j] = c;
                        cache.hprev[cbase + j] = hold[j];
                    }
                    y[ybase + j] = hnew;
                    hold[j] = hnew;
                }
            }
        }
        drop(xd);
        drop(wih);
        drop(whh);
        drop(bih);
        drop(bhh);

        let op = if rec {
            Op::Gru {
                x: self.clone(),
                w_ih: w_ih.clone(),
                w_hh: w_hh.clone(),
                b_ih: b_ih.clone(),
                b_hh: b_hh.clone(),
                reverse,
                cache: Box::new(cache),
            }
        } else {
            Op::None
        };
        Ok(Tensor::from_op(vec![b, t, h], y, op))
    }
}

fn sigmoid<E: Elem>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// Backpropagation through time for one direction. Returns
/// `(dx, dw_ih, dw_hh, db_ih, db_hh)`.
#[allow(clippy::type_complexity)]
pub(crate) fn gru_vjp<E: Elem>(
    x: &Tensor<E>,
    w_ih: &Tensor<E>,
    w_hh: &Tensor<E>,
    reverse: bool,
    cache: &GruCache<E>,
    g: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>, Vec<E>, Vec<E>) {
    let (b, t, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = w_hh.shape()[0];
    let one = E::one();

    let whh = w_hh.data();
    // Per-step gate gradients, stored at their natural time index:
    // da_i feeds the input-side weights, da_h the recurrent-side weights.
    let mut da_i = vec![E::zero(); b * t * 3 * h];
    let mut da_h = vec![E::zero(); b * t * 3 * h];
    let mut dh = vec![E::zero(); b * h];
    let mut dh_rec = vec![E::zero(); b * h];
    // Contiguous per-step slab so the recurrent-path gradient is one
    // batched matmul per step instead of one tiny call per batch row.
    let mut dah_step = vec![E::zero(); b * 3 * h];

    for step in (0..t).rev() {
        let time = if reverse { t - 1 - step } else { step };
        for bi in 0..b {
            let base = (bi * t + time) * h;
            let dhrow = &mut dh[bi * h..(bi + 1) * h];
            let dai = &mut da_i[(bi * t + time) * 3 * h..(bi * t + time + 1) * 3 * h];
            let dah = &mut dah_step[bi * 3 * h..(bi + 1) * 3 * h];
            for j in 0..h {
                let dhv = dhrow[j] + g[base + j];
                let r = cache.r[base + j];
                let z = cache.z[base + j];
                let n = cache.n[base + j];
                let c = cache.c[base + j];
                let hprev = cache.hprev[base + j];

                let dz = dhv * (hprev - n);
                let da_z = dz * z * (one - z);
                let dn = dhv * (one - z);
                let da_n = dn * (one - n * n);
                let dc = da_n * r;
                let dr = da_n * c;
                let da_r = dr * r * (one - r);

                dai[j] = da_r;
                dai[h + j] = da_z;
                dai[2 * h + j] = da_n;
                dah[j] = da_r;
                dah[h + j] = da_z;
                dah[2 * h + j] = dc;

                // Direct path into h_{t-1}; the matmul path is added below.
                dhrow[j] = dhv * z;
            }
        }
        // dh_prev += da_h @ w_hh^T for every batch row at once.
        gemm_nt(b, 3 * h, h, one, &dah_step, &whh, E::zero(), &mut dh_rec);
        for (dst, &src) in dh.iter_mut().zip(dh_rec.iter()) {
            *dst += src;
        }
        // File the step's gate gradients at their natural time index for
        // the weight and bias reductions below.
        for bi in 0..b {
            da_h[(bi * t + time) * 3 * h..(bi * t + time + 1) * 3 * h]
                .copy_from_slice(&dah_step[bi * 3 * h..(bi + 1) * 3 * h]);
        }
    }
    drop(whh);

    let xd = x.data();
    let wih = w_ih.data();
    let mut dx = vec![E::zero(); b * t * din];
    let mut dw_ih = vec![E::zero(); din * 3 * h];
    let mut dw_hh = vec![E::zero(); h * 3 * h];
    gemm_nt(b * t, 3 * h, din, one, &da_i, &wih, E::zero(), &mut dx);
    gemm_tn(b * t, din, 3 * h, one, &xd, &da_i, E::zero(), &mut dw_ih);
    gemm_tn(b * t, h, 3 * h, one, &cache.hprev, &da_h, E::zero(), &mut dw_hh);

    let mut db_ih = vec![E::zero(); 3 * h];
    let mut db_hh = vec![E::zero(); 3 * h];
    for row in da_i.chunks_exact(3 * h) {
        for (j, &v) in row.iter().enumerate() {
            db_ih[j] += v;
        }
    }
    for row in da_h.chunks_exact(3 * h) {
        for (j, &v) in row.iter().enumerate() {
            db_hh[j] += v;
        }
    }
    (dx, dw_ih, dw_hh, db_ih, db_hh)
}
