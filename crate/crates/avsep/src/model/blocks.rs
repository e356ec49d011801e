//! Building blocks of the extractor: parameter containers with their forward
//! passes. Three kinds of block matter here: the dual-path block (intra- and
//! inter-chunk recurrences over a chunked time axis), the inter-speaker
//! attention block (single-head self-attention across the speaker axis, per
//! time frame), and the visual encoder that turns a 25 fps feature stream
//! into frame-rate-aligned conditioning embeddings.
//!
//! Every container exposes `visit` so the model can enumerate its parameters
//! under stable names for checkpoints and the optimizer. Parameter tensors
//! are shared handles: mutating them through the visited list updates the
//! block in place.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
use crate::visual::VisualStream;

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Draws a uniform `(-bound, bound)` variable tensor; the `f64` draws are
/// narrowed to the element type so f32 and f64 models see the same stream.
pub(super) fn rand_kernel_var<E: Elem>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    bound: f64,
) -> Tensor<E> {
    rand_var(rng, shape, bound)
}

fn rand_var<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::var_from_vec(data, shape).expect("shape/data length consistent by construction")
}

/// Learned affine map `x @ w + b` on the trailing dimension.
#[derive(Debug, Clone)]
pub struct Affine<E: Elem> {
    /// `[d_in, d_out]`.
    pub w: Tensor<E>,
    /// `[d_out]`.
    pub b: Tensor<E>,
}

impl<E: Elem> Affine<E> {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Affine {
            w: rand_var(rng, &[d_in, d_out], bound),
            b: rand_var(rng, &[d_out], bound),
        }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.linear(&self.w, &self.b)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// One direction of a gated recurrent layer (gate order `[r | z | n]`).
#[derive(Debug, Clone)]
pub struct GruDir<E: Elem> {
    /// `[d_in, 3h]`.
    pub w_ih: Tensor<E>,
    /// `[h, 3h]`.
    pub w_hh: Tensor<E>,
    /// `[3h]`.
    pub b_ih: Tensor<E>,
    /// `[3h]`.
    pub b_hh: Tensor<E>,
}

impl<E: Elem> GruDir<E> {
    /// All four tensors drawn uniform with bound `1/sqrt(hidden)`, the usual
    /// recurrent-layer convention.
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruDir {
            w_ih: rand_var(rng, &[d_in, 3 * hidden], bound),
            w_hh: rand_var(rng, &[hidden, 3 * hidden], bound),
            b_ih: rand_var(rng, &[3 * hidden], bound),
            b_hh: rand_var(rng, &[3 * hidden], bound),
        }
    }

    pub fn apply(&self, x: &Tensor<E>, reverse: bool) -> Result<Tensor<E>> {
        x.gru(&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh, reverse)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.w_ih"), self.w_ih.clone()));
        out.push((format!("{prefix}.w_hh"), self.w_hh.clone()));
        out.push((format!("{prefix}.b_ih"), self.b_ih.clone()));
        out.push((format!("{prefix}.b_hh"), self.b_hh.clone()));
    }
}

/// Layer-norm scale and shift over the trailing dimension. Initialized to
/// the identity transform (gamma 1, beta 0), so a freshly built residual
/// branch whose weights are zeroed maps exactly to zero.
#[derive(Debug, Clone)]
pub struct NormParams<E: Elem> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Elem> NormParams<E> {
    pub fn init(d: usize) -> Self {
        NormParams {
            gamma: Tensor::var_from_vec(vec![E::one(); d], &[d]).expect("1-d shape"),
            beta: Tensor::var_from_vec(vec![E::zero(); d], &[d]).expect("1-d shape"),
        }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// One recurrent path of a dual-path block: bidirectional recurrence,
/// projection back to the embedding size, layer norm, residual add.
#[derive(Debug, Clone)]
pub struct RnnPath<E: Elem> {
    pub fwd: GruDir<E>,
    pub bwd: GruDir<E>,
    /// `[2h, d]` projection of the concatenated directions.
    pub proj: Affine<E>,
    pub norm: NormParams<E>,
}

impl<E: Elem> RnnPath<E> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Self {
        RnnPath {
            fwd: GruDir::init(rng, d, hidden),
            bwd: GruDir::init(rng, d, hidden),
            proj: Affine::init(rng, 2 * hidden, d),
            norm: NormParams::init(d),
        }
    }

    /// `x + norm(proj(birnn(x)))` over `[batch, steps, d]`.
    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = x.gru_bidir(
            &self.fwd.w_ih,
            &self.fwd.w_hh,
            &self.fwd.b_ih,
            &self.fwd.b_hh,
            &self.bwd.w_ih,
            &self.bwd.w_hh,
            &self.bwd.b_ih,
            &self.bwd.b_hh,
        )?;
        let n = self.norm.apply(&self.proj.apply(&h)?)?;
        x.add(&n)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.fwd.visit(&format!("{prefix}.gru.fwd"), out);
        self.bwd.visit(&format!("{prefix}.gru.bwd"), out);
        self.proj.visit(&format!("{prefix}.proj"), out);
        self.norm.visit(&format!("{prefix}.norm"), out);
    }
}

/// Dual-path block: segment the time axis into 50 %-overlapped chunks, run
/// a recurrence within each chunk (intra), then one across chunks at each
/// within-chunk offset (inter), and overlap-add back. Shape-preserving.
#[derive(Debug, Clone)]
pub struct DualPathBlock<E: Elem> {
    pub intra: RnnPath<E>,
    pub inter: RnnPath<E>,
}

impl<E: Elem> DualPathBlock<E> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Self {
        DualPathBlock {
            intra: RnnPath::init(rng, d, hidden),
            inter: RnnPath::init(rng, d, hidden),
        }
    }

    /// Processes `[speakers, t, d]`; speakers ride along as batch rows, so
    /// the temporal model is shared but sees each speaker independently.
    pub fn forward(&self, x: &Tensor<E>, chunk: usize, hop: usize) -> Result<Tensor<E>> {
        if x.ndim() != 3 {
            return Err(Error::Dimension {
                op: "dual_path_block",
                msg: format!("need [speakers, t, d] input, got {:?}", x.shape()),
            });
        }
        let (s, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let chunks = x.segment_chunks(chunk, hop)?; // [s, n, chunk, d]
        let n = chunks.shape()[1];

        let intra_in = chunks.reshape(&[s * n, chunk, d])?;
        let intra_out = self.intra.apply(&intra_in)?.reshape(&[s, n, chunk, d])?;

        let inter_in = intra_out.permute(&[0, 2, 1, 3])?.reshape(&[s * chunk, n, d])?;
        let inter_out = self
            .inter
            .apply(&inter_in)?
            .reshape(&[s, chunk, n, d])?
            .permute(&[0, 2, 1, 3])?;

        inter_out.merge_chunks(hop, t)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.intra.visit(&format!("{prefix}.intra"), out);
        self.inter.visit(&format!("{prefix}.inter"), out);
    }
}

/// Per-speaker embeddings for one mixture, stacked along a leading speaker
/// axis, with the target always at index 0. `present` marks which rows take
/// part in cross-speaker attention; rows marked absent pass through the
/// attention block untouched.
#[derive(Debug, Clone)]
pub struct SpeakerBatch<E: Elem> {
    /// `[speakers, t, d]`.
    pub embeddings: Tensor<E>,
    pub present: Vec<bool>,
}

impl<E: Elem> SpeakerBatch<E> {
    pub fn new(embeddings: Tensor<E>, present: Vec<bool>) -> Result<Self> {
        if embeddings.ndim() != 3 {
            return Err(Error::Dimension {
                op: "speaker_batch",
                msg: format!("need [speakers, t, d] embeddings, got {:?}", embeddings.shape()),
            });
        }
        let s = embeddings.shape()[0];
        if s == 0 || present.len() != s {
            return Err(Error::Contract(format!(
                "speaker batch needs >= 1 speaker and one presence flag each \
                 (got {s} speakers, {} flags)",
                present.len()
            )));
        }
        if !present[0] {
            return Err(Error::Contract(
                "target speaker (index 0) must be present".into(),
            ));
        }
        Ok(SpeakerBatch {
            embeddings,
            present,
        })
    }

    pub fn all_present(embeddings: Tensor<E>) -> Result<Self> {
        let s = embeddings.shape().first().copied().unwrap_or(0);
        SpeakerBatch::new(embeddings, vec![true; s])
    }

    pub fn n_speakers(&self) -> usize {
        self.present.len()
    }
}

/// Inter-speaker attention block: for each time frame independently, each
/// present speaker's embedding attends over all present speakers (single
/// head, scores scaled by `1/sqrt(d)`), followed by a residual add, a
/// two-layer feedforward (`d -> 2d -> d`) with residual, and a layer norm.
/// Absent speakers are excluded from keys and values and their rows are
/// passed through bit-identically.
#[derive(Debug, Clone)]
pub struct IsamBlock<E: Elem> {
    pub q: Affine<E>,
    pub k: Affine<E>,
    pub v: Affine<E>,
    pub o: Affine<E>,
    pub ff1: Affine<E>,
    pub ff2: Affine<E>,
    pub norm: NormParams<E>,
}

impl<E: Elem> IsamBlock<E> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        IsamBlock {
            q: Affine::init(rng, d, d),
            k: Affine::init(rng, d, d),
            v: Affine::init(rng, d, d),
            o: Affine::init(rng, d, d),
            ff1: Affine::init(rng, d, 2 * d),
            ff2: Affine::init(rng, 2 * d, d),
            norm: NormParams::init(d),
        }
    }

    /// With `bypass` the batch is returned unchanged (the exact identity);
    /// the attention path is not evaluated at all.
    pub fn forward(&self, batch: &SpeakerBatch<E>, bypass: bool) -> Result<SpeakerBatch<E>> {
        if bypass {
            return Ok(batch.clone());
        }
        let x = &batch.embeddings;
        let q = self.q.apply(x)?;
        let k = self.k.apply(x)?;
        let v = self.v.apply(x)?;
        let att = Tensor::speaker_attention(&q, &k, &v, &batch.present)?;
        let a = x.add(&self.o.apply(&att)?)?;
        let f = a.add(&self.ff2.apply(&self.ff1.apply(&a)?.relu())?)?;
        let out = self.norm.apply(&f)?;

        let embeddings = if batch.present.iter().all(|&p| p) {
            out
        } else {
            // Splice the untouched original rows back in for absent speakers.
            let rows: Vec<Tensor<E>> = batch
                .present
                .iter()
                .enumerate()
                .map(|(i, &p)| if p { &out } else { x }.narrow(0, i, 1))
                .collect::<Result<_>>()?;
            Tensor::concat(&rows, 0)?
        };
        Ok(SpeakerBatch {
            embeddings,
            present: batch.present.clone(),
        })
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.q.visit(&format!("{prefix}.q"), out);
        self.k.visit(&format!("{prefix}.k"), out);
        self.v.visit(&format!("{prefix}.v"), out);
        self.o.visit(&format!("{prefix}.o"), out);
        self.ff1.visit(&format!("{prefix}.ff1"), out);
        self.ff2.visit(&format!("{prefix}.ff2"), out);
        self.norm.visit(&format!("{prefix}.norm"), out);
    }
}

/// Visual encoder: per-frame affine with a squashing nonlinearity, a
/// forward recurrence over video frames, a projection to the embedding
/// size, and integer upsampling to the audio latent frame rate.
#[derive(Debug, Clone)]
pub struct VisualEncoder<E: Elem> {
    pub affine: Affine<E>,
    pub rnn: GruDir<E>,
    pub proj: Affine<E>,
}

impl<E: Elem> VisualEncoder<E> {
    pub fn init(rng: &mut ChaCha8Rng, d_vis: usize, d_hidden: usize, d_rnn: usize, d_emb: usize) -> Self {
        VisualEncoder {
            affine: Affine::init(rng, d_vis, d_hidden),
            rnn: GruDir::init(rng, d_hidden, d_rnn),
            proj: Affine::init(rng, d_rnn, d_emb),
        }
    }

    /// Embeds one stream to `[t_video * upsample, d_emb]`.
    pub fn encode(&self, stream: &VisualStream, upsample: usize) -> Result<Tensor<E>> {
        let d_vis = self.affine.w.shape()[0];
        if stream.d_vis != d_vis {
            return Err(Error::ShapeMismatch {
                op: "encode_visual",
                lhs: vec![stream.t_video, stream.d_vis],
                rhs: vec![d_vis],
            });
        }
        let data: Vec<E> = stream.frames.iter().map(|&v| E::of_f64(v as f64)).collect();
        let frames = Tensor::from_vec(data, &[stream.t_video, stream.d_vis])?;
        let h = self.affine.apply(&frames)?.tanh();
        let d_hidden = self.affine.w.shape()[1];
        let seq = h.reshape(&[1, stream.t_video, d_hidden])?;
        let r = self.rnn.apply(&seq, false)?;
        let d_rnn = self.rnn.w_hh.shape()[0];
        let flat = r.reshape(&[stream.t_video, d_rnn])?;
        self.proj.apply(&flat)?.repeat_rows(upsample)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.affine.visit(&format!("{prefix}.affine"), out);
        self.rnn.visit(&format!("{prefix}.gru"), out);
        self.proj.visit(&format!("{prefix}.proj"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use crate::visual::synth_visual;
    use rand::SeedableRng;

    type T64 = Tensor<f64>;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        T64::from_vec(data, shape).unwrap()
    }

    fn max_abs_diff(a: &T64, b: &T64) -> f64 {
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn dual_path_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = DualPathBlock::<f64>::init(&mut rng, 8, 6);
        for t in [10, 37, 60] {
            let x = rand_tensor(&mut rng, &[2, t, 8]);
            let y = block.forward(&x, 10, 5).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn dual_path_with_zeroed_weights_is_the_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = DualPathBlock::<f64>::init(&mut rng, 8, 6);
        for path in [&block.intra, &block.inter] {
            for p in [
                &path.fwd.w_ih,
                &path.fwd.w_hh,
                &path.fwd.b_ih,
                &path.fwd.b_hh,
                &path.bwd.w_ih,
                &path.bwd.w_hh,
                &path.bwd.b_ih,
                &path.bwd.b_hh,
                &path.proj.w,
                &path.proj.b,
            ] {
                p.update_data(|d| d.fill(0.0));
            }
        }
        // Norm params keep their identity init (gamma 1, beta 0); a zeroed
        // branch normalizes to exactly zero, so the residual returns x and
        // the overlap-add halves the doubled coverage exactly.
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[2, 41, 8]);
        let y = block.forward(&x, 10, 5).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dual_path_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = DualPathBlock::<f64>::init(&mut rng, 8, 4);
        let x = Tensor::var_from_vec(
            (0..60 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[1, 60, 8],
        )
        .unwrap();
        let weight = rand_tensor(&mut rng, &[1, 60, 8]);
        for target in [&x, &block.intra.proj.w, &block.inter.fwd.w_hh, &block.intra.norm.gamma] {
            let report = finite_diff_check("dual_path", target, 1e-4, |_| {
                Ok(block.forward(&x, 10, 5)?.mul(&weight)?.sum_all())
            })
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn attention_bypass_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = IsamBlock::<f64>::init(&mut rng, 8);
        let batch = SpeakerBatch::all_present(rand_tensor(&mut rng, &[3, 7, 8])).unwrap();
        let out = block.forward(&batch, true).unwrap();
        assert_eq!(out.embeddings.to_vec(), batch.embeddings.to_vec());
        assert_eq!(out.present, batch.present);
    }

    #[test]
    fn single_speaker_attends_to_itself_with_weight_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = IsamBlock::<f64>::init(&mut rng, 8);
        let x = rand_tensor(&mut rng, &[1, 5, 8]);
        let out = block
            .forward(&SpeakerBatch::all_present(x.clone()).unwrap(), false)
            .unwrap();

        // Reference: with one speaker the attention output is exactly the
        // value projection, so the block reduces to
        // norm(a + ffn(a)) with a = x + o(v(x)).
        let a = x.add(&block.o.apply(&block.v.apply(&x).unwrap()).unwrap()).unwrap();
        let f = a
            .add(&block.ff2.apply(&block.ff1.apply(&a).unwrap().relu()).unwrap())
            .unwrap();
        let expect = block.norm.apply(&f).unwrap();
        assert!(max_abs_diff(&out.embeddings, &expect) < 1e-12);
    }

    #[test]
    fn attention_is_equivariant_under_speaker_permutation() {
        // 32-bit model, matching how training runs.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = IsamBlock::<f32>::init(&mut rng, 8);
        for (s, perm) in [(2usize, vec![1usize, 0]), (3, vec![2, 0, 1]), (4, vec![3, 1, 0, 2])] {
            let data: Vec<f32> = (0..s * 6 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let x = Tensor::from_vec(data, &[s, 6, 8]).unwrap();
            let permuted =
                Tensor::concat(&perm.iter().map(|&i| x.narrow(0, i, 1).unwrap()).collect::<Vec<_>>(), 0)
                    .unwrap();

            let out = block
                .forward(&SpeakerBatch::all_present(x).unwrap(), false)
                .unwrap()
                .embeddings;
            let out_of_permuted = block
                .forward(&SpeakerBatch::all_present(permuted).unwrap(), false)
                .unwrap()
                .embeddings;
            let permuted_out = Tensor::concat(
                &perm.iter().map(|&i| out.narrow(0, i, 1).unwrap()).collect::<Vec<_>>(),
                0,
            )
            .unwrap();

            let diff = out_of_permuted
                .data()
                .iter()
                .zip(permuted_out.data().iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-5, "s={s}: max deviation {diff}");
        }
    }

    #[test]
    fn identical_speakers_get_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = IsamBlock::<f64>::init(&mut rng, 8);
        let row: Vec<f64> = (0..6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = T64::from_vec(data, &[2, 6, 8]).unwrap();
        let out = block
            .forward(&SpeakerBatch::all_present(x).unwrap(), false)
            .unwrap()
            .embeddings;
        let od = out.data();
        let (a, b) = od.split_at(6 * 8);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn absent_speakers_pass_through_untouched_and_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = IsamBlock::<f64>::init(&mut rng, 8);
        let x = rand_tensor(&mut rng, &[3, 5, 8]);
        let batch = SpeakerBatch::new(x.clone(), vec![true, false, true]).unwrap();
        let out = block.forward(&batch, false).unwrap().embeddings;

        // Row 1 is absent: bit-identical pass-through.
        assert_eq!(
            out.narrow(0, 1, 1).unwrap().to_vec(),
            x.narrow(0, 1, 1).unwrap().to_vec()
        );

        // Present rows behave exactly as if the absent speaker were never
        // in the batch.
        let compact = Tensor::concat(
            &[x.narrow(0, 0, 1).unwrap(), x.narrow(0, 2, 1).unwrap()],
            0,
        )
        .unwrap();
        let compact_out = block
            .forward(&SpeakerBatch::all_present(compact).unwrap(), false)
            .unwrap()
            .embeddings;
        let joint = Tensor::concat(
            &[out.narrow(0, 0, 1).unwrap(), out.narrow(0, 2, 1).unwrap()],
            0,
        )
        .unwrap();
        assert!(max_abs_diff(&joint, &compact_out) < 1e-12);
    }

    #[test]
    fn speaker_batch_contract_errors() {
        let x = T64::zeros(&[2, 4, 8]);
        let err = SpeakerBatch::new(x.clone(), vec![true]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
        let err = SpeakerBatch::new(x, vec![false, true]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
        let err = SpeakerBatch::all_present(T64::zeros(&[4, 8])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let block = IsamBlock::<f64>::init(&mut rng, 5);
        let x = Tensor::var_from_vec(
            (0..3 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[3, 4, 5],
        )
        .unwrap();
        let batch = SpeakerBatch::new(x.clone(), vec![true, true, false]).unwrap();
        let weight = rand_tensor(&mut rng, &[3, 4, 5]);
        for target in [&x, &block.q.w, &block.ff1.b, &block.norm.beta] {
            let report = finite_diff_check("isam_block", target, 1e-4, |_| {
                Ok(block
                    .forward(&batch, false)?
                    .embeddings
                    .mul(&weight)?
                    .sum_all())
            })
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn visual_encoder_is_deterministic_and_identity_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = VisualEncoder::<f64>::init(&mut rng, 24, 16, 12, 8);
        let wave: Vec<f32> = (0..16_000).map(|i| (i as f32 / 50.0).sin() * 0.3).collect();
        let iv = [(0, wave.len())];
        let a = enc.encode(&synth_visual(&iv, &wave, 1), 32).unwrap();
        let b = enc.encode(&synth_visual(&iv, &wave, 1), 32).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(a.shape(), [25 * 32, 8]);

        let c = enc.encode(&synth_visual(&iv, &wave, 2), 32).unwrap();
        let dist: f64 = a
            .data()
            .iter()
            .zip(c.data().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn visual_encoder_rejects_wrong_feature_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let enc = VisualEncoder::<f64>::init(&mut rng, 10, 16, 12, 8);
        let wave = vec![0.0f32; 6400];
        let err = enc
            .encode(&synth_visual(&[(0, 6400)], &wave, 1), 32)
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn upsampling_repeats_rows_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let enc = VisualEncoder::<f64>::init(&mut rng, 24, 16, 12, 8);
        let wave = vec![0.1f32; 1280]; // 2 video frames
        let up = enc.encode(&synth_visual(&[(0, 1280)], &wave, 3), 4).unwrap();
        assert_eq!(up.shape(), [8, 8]);
        let d = up.data();
        for rep in 0..4 {
            assert_eq!(d[rep * 8..(rep + 1) * 8], d[0..8]);
            assert_eq!(d[(4 + rep) * 8..(5 + rep) * 8], d[4 * 8..5 * 8]);
        }
    }
}
