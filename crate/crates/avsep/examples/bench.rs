//! Scratch component timing harness. Not part of the test suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avsep::model::{ExtractorModel, ModelConfig};
use avsep::tensor::Tensor;
use avsep::train::TrainSample;

fn t<F: FnMut()>(label: &str, iters: usize, mut f: F) {
    let start = Instant::now();
    for _ in 0..iters {
        f();
    }
    let per = start.elapsed().as_secs_f64() / iters as f64;
    eprintln!("{label}: {:.1} ms/iter", per * 1e3);
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::var_from_vec(data, shape).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Dual-path-sized GRU: intra pass shape [s*n_chunks, chunk, d].
    let x = randn(&mut rng, &[130, 50, 64]);
    let w_ih = randn(&mut rng, &[64, 192]);
    let w_hh = randn(&mut rng, &[64, 192]);
    let b_ih = randn(&mut rng, &[192]);
    let b_hh = randn(&mut rng, &[192]);
    t("gru fwd [130,50,64]->h64", 3, || {
        let y = x
            .gru_bidir(&w_ih, &w_hh, &b_ih, &b_hh, &w_ih, &w_hh, &b_ih, &b_hh)
            .unwrap();
        std::hint::black_box(y.data().len());
    });
    t("gru fwd+bwd [130,50,64]", 3, || {
        let y = x
            .gru_bidir(&w_ih, &w_hh, &b_ih, &b_hh, &w_ih, &w_hh, &b_ih, &b_hh)
            .unwrap();
        y.sum_all().backward().unwrap();
        x.zero_grad();
    });

    // Inter pass shape [s*n_chunks_T, n_chunks, d] ~ [100, 65, 64].
    let xi = randn(&mut rng, &[100, 65, 64]);
    t("gru fwd+bwd [100,65,64]", 3, || {
        let y = xi
            .gru_bidir(&w_ih, &w_hh, &b_ih, &b_hh, &w_ih, &w_hh, &b_ih, &b_hh)
            .unwrap();
        y.sum_all().backward().unwrap();
        xi.zero_grad();
    });

    // Visual-frontend-sized GRU: [1, 50, 256] with hidden 256.
    let xv = randn(&mut rng, &[1, 50, 256]);
    let wv_ih = randn(&mut rng, &[256, 768]);
    let wv_hh = randn(&mut rng, &[256, 768]);
    let bv = randn(&mut rng, &[768]);
    t("gru fwd+bwd [1,50,256]->h256", 3, || {
        let y = xv
            .gru_bidir(&wv_ih, &wv_hh, &bv, &bv, &wv_ih, &wv_hh, &bv, &bv)
            .unwrap();
        y.sum_all().backward().unwrap();
        xv.zero_grad();
    });

    // Encoder conv: [1,1,32000] k=40 s=20 -> 64 ch.
    let wav = randn(&mut rng, &[1, 32_000]);
    let kern = randn(&mut rng, &[64, 1, 40]);
    t("conv1d fwd+bwd", 5, || {
        let y = wav.conv1d(&kern, 20).unwrap();
        y.sum_all().backward().unwrap();
        wav.zero_grad();
    });
    let lat = randn(&mut rng, &[64, 1599]);
    let kt = randn(&mut rng, &[64, 40]);
    t("conv_transpose1d fwd+bwd", 5, || {
        let y = lat.conv_transpose1d(&kt, 20).unwrap();
        y.sum_all().backward().unwrap();
        lat.zero_grad();
    });

    // Attention over speakers: [2, 1599, 64].
    let q = randn(&mut rng, &[2, 1599, 64]);
    let k = randn(&mut rng, &[2, 1599, 64]);
    let v = randn(&mut rng, &[2, 1599, 64]);
    t("speaker_attention fwd+bwd", 3, || {
        let y = Tensor::speaker_attention(&q, &k, &v, &[true, true]).unwrap();
        y.sum_all().backward().unwrap();
        q.zero_grad();
    });

    // Whole model.
    let sample = TrainSample::synth_sparse(32_000, 2, 0.3, 42).unwrap();
    let model = ExtractorModel::<f32>::init(ModelConfig::default(), 1).unwrap();
    t("model forward 2s/2spk", 3, || {
        let est = model
            .extract(&sample.mix.mixture, &sample.visuals, false)
            .unwrap();
        std::hint::black_box(est.len());
    });
}
