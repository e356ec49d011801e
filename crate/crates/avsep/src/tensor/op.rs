//! Graph op records. Each variant holds its parent tensors plus whatever
//! forward-pass state the matching VJP needs.

use super::{Elem, Tensor};

pub(crate) struct GruCache<E: Elem> {
    /// Reset gates, `[b, t, h]` in forward iteration order.
    pub r: Vec<E>,
    /// Update gates.
    pub z: Vec<E>,
    /// Candidate states.
    pub n: Vec<E>,
    /// Recurrent candidate pre-activation `W_hn h' + b_hn`.
    pub c: Vec<E>,
    /// Hidden state entering each step (`h_{t-1}` in iteration order).
    pub hprev: Vec<E>,
}

pub(crate) enum Op<E: Elem> {
    None,
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Div(Tensor<E>, Tensor<E>),
    Neg(Tensor<E>),
    Scale(Tensor<E>, E),
    AddScalar(Tensor<E>),
    Relu(Tensor<E>),
    Tanh(Tensor<E>),
    Sigmoid(Tensor<E>),
    Exp(Tensor<E>),
    Ln(Tensor<E>),
    Clamp(Tensor<E>, E, E),
    Matmul(Tensor<E>, Tensor<E>),
    /// Adds a `[d]` bias to every length-`d` row of `x`.
    AddRowBias(Tensor<E>, Tensor<E>),
    Conv1d {
        x: Tensor<E>,
        kernel: Tensor<E>,
        stride: usize,
    },
    ConvTranspose1d {
        x: Tensor<E>,
        kernel: Tensor<E>,
        stride: usize,
    },
    SumAll(Tensor<E>),
    MeanAll(Tensor<E>),
    Softmax {
        x: Tensor<E>,
        axis: usize,
    },
    LayerNorm {
        x: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        /// `(mean, rstd)` per normalized row.
        cache: Vec<(E, E)>,
    },
    Gru {
        x: Tensor<E>,
        w_ih: Tensor<E>,
        w_hh: Tensor<E>,
        b_ih: Tensor<E>,
        b_hh: Tensor<E>,
        reverse: bool,
        cache: Box<GruCache<E>>,
    },
    /// Per-frame single-head attention over the speaker axis.
    SpeakerAttn {
        q: Tensor<E>,
        k: Tensor<E>,
        v: Tensor<E>,
        present: Vec<bool>,
        /// Softmax weights, `[t, s, s]`; rows for absent speakers are zero.
        weights: Vec<E>,
    },
    Reshape(Tensor<E>),
    Permute {
        x: Tensor<E>,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Tensor<E>>,
        axis: usize,
    },
    Narrow {
        x: Tensor<E>,
        axis: usize,
        start: usize,
    },
    RepeatRows {
        x: Tensor<E>,
        factor: usize,
    },
    Segment {
        x: Tensor<E>,
        chunk: usize,
        hop: usize,
    },
    Merge {
        x: Tensor<E>,
        hop: usize,
        out_len: usize,
    },
    /// Broadcast multiply by a single-element tensor.
    ScaleBy {
        x: Tensor<E>,
        s: Tensor<E>,
    },
}

impl<E: Elem> Op<E> {
    pub(crate) fn visit_parents(&self, mut f: impl FnMut(&Tensor<E>)) {
        match self {
            Op::None => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                f(a);
                f(b);
            }
            Op::AddRowBias(a, b) => {
                f(a);
                f(b);
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Reshape(a) => f(a),
            Op::Conv1d { x, kernel, .. } | Op::ConvTranspose1d { x, kernel, .. } => {
                f(x);
                f(kernel);
            }
            Op::Softmax { x, .. } => f(x),
            Op::LayerNorm { x, gamma, beta, .. } => {
                f(x);
                f(gamma);
                f(beta);
            }
            Op::Gru {
                x,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                ..
            } => {
                f(x);
                f(w_ih);
                f(w_hh);
                f(b_ih);
                f(b_hh);
            }
            Op::SpeakerAttn { q, k, v, .. } => {
                f(q);
                f(k);
                f(v);
            }
            Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::RepeatRows { x, .. }
            | Op::Segment { x, .. }
            | Op::Merge { x, .. } => f(x),
            Op::Concat { xs, .. } => {
                for x in xs {
                    f(x);
                }
            }
            Op::ScaleBy { x, s } => {
                f(x);
                f(s);
            }
        }
    }

    pub(crate) fn any_parent_connected(&self) -> bool {
        let mut connected = false;
        self.visit_parents(|p| connected = connected || p.connected());
        connected
    }
}
