//! Packaged finite-difference gradient suite.
//!
//! Runs every differentiable operation family through
//! [`finite_diff_check`](crate::tensor::finite_diff_check) on small seeded
//! inputs, then drives a miniature end-to-end model (one block, embedding
//! width 8, a quarter second of audio) through the training objective and
//! checks a representative parameter from each module. Everything runs in
//! 64-bit. The `gradcheck` subcommand prints these reports; the test suite
//! asserts they all pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics;
use crate::mixsim::{mix_dense, synth_speech_like};
use crate::model::{ExtractorModel, ModelConfig};
use crate::tensor::{finite_diff_check, GradReport, Tensor};
use crate::visual::synth_visual;

type T64 = Tensor<f64>;

fn rand_var(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    T64::var_from_vec(data, shape).unwrap()
}

fn op_checks(seed: u64, out: &mut Vec<GradReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let x = rand_var(&mut rng, &[8]);
    out.push(finite_diff_check("elementwise_chain", &x, 1e-6, |x| {
        let a = x.tanh().scale(0.5).add_scalar(0.1);
        let b = x.sigmoid().mul(&a)?;
        Ok(b.exp().sum_all())
    })?);

    let x = rand_var(&mut rng, &[3, 4]);
    let w = rand_var(&mut rng, &[4, 2]);
    let b = rand_var(&mut rng, &[2]);
    for (name, var) in [("matmul_x", &x), ("matmul_w", &w), ("matmul_b", &b)] {
        out.push(finite_diff_check(name, var, 1e-6, |_| {
            Ok(x.matmul(&w)?.add_row_bias(&b)?.relu().sum_all())
        })?);
    }

    let x = rand_var(&mut rng, &[4, 5]);
    let gamma = rand_var(&mut rng, &[5]);
    let beta = rand_var(&mut rng, &[5]);
    let weight = rand_var(&mut rng, &[4, 5]).detach();
    for (name, var) in [
        ("layer_norm_x", &x),
        ("layer_norm_gamma", &gamma),
        ("layer_norm_beta", &beta),
    ] {
        out.push(finite_diff_check(name, var, 1e-5, |_| {
            let y = x.layer_norm(&gamma, &beta, 1e-8)?;
            Ok(y.softmax(1)?.mul(&weight)?.sum_all())
        })?);
    }

    let num = T64::var_from_vec((0..6).map(|_| rng.gen_range(0.5..2.0)).collect(), &[6]).unwrap();
    let den = T64::var_from_vec((0..6).map(|_| rng.gen_range(0.5..2.0)).collect(), &[6]).unwrap();
    for (name, var) in [("div_ln_num", &num), ("div_ln_den", &den)] {
        out.push(finite_diff_check(name, var, 1e-6, |_| {
            Ok(num.div(&den)?.ln().sum_all())
        })?);
    }

    let x = rand_var(&mut rng, &[1, 30]);
    let k = rand_var(&mut rng, &[3, 1, 8]);
    let kt = rand_var(&mut rng, &[3, 8]);
    for (name, var) in [("conv1d_x", &x), ("conv1d_kernel", &k), ("conv_transpose_kernel", &kt)] {
        out.push(finite_diff_check(name, var, 1e-6, |_| {
            let latent = x.conv1d(&k, 4)?.relu();
            let wave = latent.conv_transpose1d(&kt, 4)?;
            Ok(wave.mul(&wave)?.sum_all())
        })?);
    }

    let (din, h) = (3usize, 4usize);
    let x = rand_var(&mut rng, &[2, 5, din]);
    let w_ih = rand_var(&mut rng, &[din, 3 * h]);
    let w_hh = rand_var(&mut rng, &[h, 3 * h]);
    let b_ih = rand_var(&mut rng, &[3 * h]);
    let b_hh = rand_var(&mut rng, &[3 * h]);
    for reverse in [false, true] {
        let dir = if reverse { "rev" } else { "fwd" };
        for (name, var) in [
            (format!("gru_{dir}_x"), &x),
            (format!("gru_{dir}_w_ih"), &w_ih),
            (format!("gru_{dir}_w_hh"), &w_hh),
            (format!("gru_{dir}_b_ih"), &b_ih),
            (format!("gru_{dir}_b_hh"), &b_hh),
        ] {
            out.push(finite_diff_check(&name, var, 1e-5, |_| {
                let y = x.gru(&w_ih, &w_hh, &b_ih, &b_hh, reverse)?;
                Ok(y.mul(&y)?.sum_all())
            })?);
        }
    }

    let shape = [3usize, 4, 5];
    let q = rand_var(&mut rng, &shape);
    let k = rand_var(&mut rng, &shape);
    let v = rand_var(&mut rng, &shape);
    let present = vec![true, false, true];
    for (name, var) in [
        ("speaker_attention_q", &q),
        ("speaker_attention_k", &k),
        ("speaker_attention_v", &v),
    ] {
        out.push(finite_diff_check(name, var, 1e-6, |_| {
            let y = Tensor::speaker_attention(&q, &k, &v, &present)?;
            Ok(y.mul(&y)?.sum_all())
        })?);
    }

    let t = 14usize;
    let x = rand_var(&mut rng, &[2, t, 3]);
    out.push(finite_diff_check("segment_merge_chunks", &x, 1e-6, |x| {
        let back = x.segment_chunks(6, 3)?.merge_chunks(3, t)?;
        Ok(back.mul(&back)?.sum_all())
    })?);

    let a = rand_var(&mut rng, &[2, 3, 4]);
    let b = rand_var(&mut rng, &[2, 2, 4]);
    for (name, var) in [("reshape_permute_concat_a", &a), ("reshape_permute_concat_b", &b)] {
        out.push(finite_diff_check(name, var, 1e-6, |_| {
            let cat = Tensor::concat(&[a.clone(), b.clone()], 1)?;
            let cut = cat.permute(&[1, 0, 2])?.reshape(&[5, 8])?.narrow(1, 2, 5)?;
            Ok(cut.mul(&cut)?.sum_all())
        })?);
    }

    let x = rand_var(&mut rng, &[3, 2]);
    let s = rand_var(&mut rng, &[1]);
    for (name, var) in [("repeat_rows_x", &x), ("scale_by_s", &s)] {
        out.push(finite_diff_check(name, var, 1e-6, |_| {
            let scaled = x.repeat_rows(4)?.scale_by(&s)?;
            Ok(scaled.mul(&scaled)?.mean_all())
        })?);
    }

    let reference = rand_var(&mut rng, &[64]).detach();
    let est = rand_var(&mut rng, &[64]);
    out.push(finite_diff_check("si_snr_loss", &est, 1e-6, |est| {
        metrics::si_snr_loss(&reference, est)
    })?);

    Ok(())
}

fn miniature_config() -> ModelConfig {
    ModelConfig {
        n_filters: 8,
        kernel_len: 40,
        frame_stride: 20,
        d_emb: 8,
        r_blocks: 1,
        chunk_size: 10,
        chunk_hop: 5,
        gru_hidden: 6,
        vis_hidden: 12,
        vis_rnn_hidden: 10,
        ..ModelConfig::default()
    }
}

fn pipeline_checks(seed: u64, out: &mut Vec<GradReport>) -> Result<()> {
    // Finite differences near a rectifier kink can misjudge an otherwise
    // correct gradient, so the default fixture is pinned to seeds verified
    // to sit away from kinks; other seeds shift all of them together.
    let model = ExtractorModel::<f64>::init(miniature_config(), 11 + seed)?;

    // A quarter second of dense two-speaker audio with matching visuals.
    let len = 4_000usize;
    let clips: Vec<Vec<f32>> = (0..2)
        .map(|i| synth_speech_like(361 + seed + i, 0.5)[..len].to_vec())
        .collect();
    let mix = mix_dense(&clips, &[0.0])?;
    let visuals: Vec<_> = (0..2)
        .map(|s| synth_visual(&[(0, len)], &mix.sources[s], 50 + seed + s as u64))
        .collect();
    let mixture = T64::from_vec(
        mix.mixture.iter().map(|&v| v as f64).collect(),
        &[len],
    )?;
    let refs: Vec<T64> = mix
        .sources
        .iter()
        .map(|s| T64::from_vec(s.iter().map(|&v| v as f64).collect(), &[len]))
        .collect::<Result<_>>()?;

    let loss = |_: &T64| {
        let ests = model.forward(&mixture, &visuals, false)?;
        metrics::loss_multi(&refs, &ests, &[true, true])
    };

    let params = model.visit_params();
    let find = |name: &str| {
        params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.clone())
            .expect("known parameter name")
    };
    for name in [
        "enc.kernel",
        "dec.kernel",
        "visual.proj.b",
        "fusion.b",
        "block0.dual.intra.proj.b",
        "block0.attn.q.b",
        "block0.attn.norm.gamma",
        "mask.b",
    ] {
        let target = find(name);
        out.push(finite_diff_check(
            &format!("pipeline:{name}"),
            &target,
            1e-4,
            loss,
        )?);
    }
    Ok(())
}

/// Runs the full suite and returns one report per check.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    op_checks(seed, &mut reports)?;
    pipeline_checks(seed, &mut reports)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_packaged_suite_passes_end_to_end() {
        let reports = run_suite(0).unwrap();
        assert!(reports.len() > 30, "suite looks truncated: {}", reports.len());
        for r in &reports {
            assert!(r.passed(), "{r}");
        }
        assert!(reports.iter().any(|r| r.name.starts_with("pipeline:")));
    }
}
