//! Finite-difference verification of analytic gradients.
//!
//! Every differentiable operation in this crate is validated against central
//! differences: perturb one input entry at a time, re-evaluate the scalar
//! objective with recording disabled, and compare the numeric slope against
//! what [`Tensor::backward`] produced. The relative error is normalized by
//! the largest gradient magnitude so that near-zero entries of an otherwise
//! healthy gradient do not dominate the ratio.

use super::{no_grad, Elem, Tensor};
use crate::error::Result;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Label identifying the checked operation or model.
    pub name: String,
    /// `max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|, 1e-12)`.
    pub max_rel_err: f64,
    /// Threshold the error is judged against.
    pub tol: f64,
    /// Number of input entries perturbed.
    pub n_checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_rel_err={:.3e} tol={:.1e} ({} entries) -> {}",
            self.name,
            self.max_rel_err,
            self.tol,
            self.n_checked,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Compares the analytic gradient of `f` with central differences at `x`.
///
/// `f` must build a scalar from the variable it is given. The analytic
/// gradient is taken from one backward pass; the numeric one perturbs each
/// entry by `h = 1e-5 * max(1, |x_i|)` in both directions. `f` is invoked
/// with gradient recording still enabled for the analytic pass and disabled
/// for the perturbed evaluations.
pub fn finite_diff_check<E, F>(name: &str, x: &Tensor<E>, tol: f64, f: F) -> Result<GradReport>
where
    E: Elem,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    x.zero_grad();
    let y = f(x)?;
    y.backward()?;
    let analytic = x
        .grad()
        .map(|g| g.iter().map(|v| v.into_f64()).collect::<Vec<f64>>())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_f64_vec();
    let mut numeric = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let h = 1e-5 * base[i].abs().max(1.0);
        let mut bumped = base.clone();
        bumped[i] = base[i] + h;
        x.set_data_f64(&bumped);
        let plus = no_grad(|| f(x).map(|t| t.item().into_f64()))?;
        bumped[i] = base[i] - h;
        x.set_data_f64(&bumped);
        let minus = no_grad(|| f(x).map(|t| t.item().into_f64()))?;
        numeric[i] = (plus - minus) / (2.0 * h);
    }
    x.set_data_f64(&base);

    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale;

    Ok(GradReport {
        name: name.to_string(),
        max_rel_err,
        tol,
        n_checked: base.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type T64 = Tensor<f64>;

    fn rand_var(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        T64::var_from_vec(data, shape).unwrap()
    }

    #[test]
    fn analytic_matches_numeric_for_square_sum() {
        // f(x) = sum(x^2): gradient 2x, trivially checkable by hand.
        let x = T64::var_from_vec(vec![3.0, -1.5], &[2]).unwrap();
        let report =
            finite_diff_check("square_sum", &x, 1e-8, |x| Ok(x.mul(x)?.sum_all())).unwrap();
        assert!(report.passed(), "{report}");
        // The variable's persistent grad reflects the analytic pass.
        assert!((x.grad().unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // Negative control: a deliberately wrong gradient must fail the
        // check, otherwise the checker proves nothing.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_var(&mut rng, &[6]);
        let report = finite_diff_check("corrupted", &x, 1e-4, |x| {
            // Correct value, wrong gradient: detach one factor so the
            // product rule is applied to only half the expression.
            let frozen = x.detach();
            Ok(x.mul(&frozen)?.sum_all())
        })
        .unwrap();
        assert!(!report.passed(), "corruption went undetected: {report}");
    }

    #[test]
    fn elementwise_chain_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_var(&mut rng, &[8]);
            let report = finite_diff_check("elementwise_chain", &x, 1e-6, |x| {
                let a = x.tanh().scale(0.5).add_scalar(0.1);
                let b = x.sigmoid().mul(&a)?;
                Ok(b.exp().sum_all())
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report}");
        }
    }

    #[test]
    fn matmul_and_bias_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_var(&mut rng, &[3, 4]);
            let w = rand_var(&mut rng, &[4, 2]);
            let b = rand_var(&mut rng, &[2]);
            for (name, var) in [("matmul_x", &x), ("matmul_w", &w), ("matmul_b", &b)] {
                let report = finite_diff_check(name, var, 1e-6, |_| {
                    Ok(x.matmul(&w)?.add_row_bias(&b)?.relu().sum_all())
                })
                .unwrap();
                assert!(report.passed(), "seed {seed}: {report}");
            }
        }
    }

    #[test]
    fn softmax_and_layer_norm_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = rand_var(&mut rng, &[4, 5]);
            let gamma = rand_var(&mut rng, &[5]);
            let beta = rand_var(&mut rng, &[5]);
            for (name, var) in [("ln_x", &x), ("ln_gamma", &gamma), ("ln_beta", &beta)] {
                let report = finite_diff_check(name, var, 1e-5, |_| {
                    let y = x.layer_norm(&gamma, &beta, 1e-8)?;
                    let s = y.softmax(1)?;
                    // Weight the softmax rows so the gradient is not all
                    // zeros by symmetry.
                    let w = Tensor::from_f64_slice(
                        &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9, -1.2, 0.5, 0.8, -0.1, 0.6, -0.3,
                          1.4, -0.9, 0.2, 0.7, -0.6, 0.1, -1.0, 0.4],
                        &[4, 5],
                    )
                    .unwrap();
                    Ok(s.mul(&w)?.sum_all())
                })
                .unwrap();
                assert!(report.passed(), "seed {seed}: {report}");
            }
        }
    }

    #[test]
    fn div_and_log_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            // Keep both operands away from zero for a well-conditioned check.
            let n: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
            let d: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
            let num = T64::var_from_vec(n, &[6]).unwrap();
            let den = T64::var_from_vec(d, &[6]).unwrap();
            for (name, var) in [("div_num", &num), ("div_den", &den)] {
                let report = finite_diff_check(name, var, 1e-6, |_| {
                    Ok(num.div(&den)?.ln().sum_all())
                })
                .unwrap();
                assert!(report.passed(), "seed {seed}: {report}");
            }
        }
    }

    #[test]
    fn conv_pair_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let x = rand_var(&mut rng, &[1, 30]);
            let k = rand_var(&mut rng, &[3, 1, 8]);
            let kt = rand_var(&mut rng, &[3, 8]);
            for (name, var) in [("conv_x", &x), ("conv_k", &k), ("conv_kt", &kt)] {
                let report = finite_diff_check(name, var, 1e-6, |_| {
                    let latent = x.conv1d(&k, 4)?.relu();
                    Ok(latent.conv_transpose1d(&kt, 4)?.mul(
                        &latent.conv_transpose1d(&kt, 4)?,
                    )?
                    .sum_all())
                })
                .unwrap();
                assert!(report.passed(), "seed {seed}: {report}");
            }
        }
    }

    #[test]
    fn gru_over_seeds() {
        let (din, h) = (3usize, 4usize);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let x = rand_var(&mut rng, &[2, 5, din]);
            let w_ih = rand_var(&mut rng, &[din, 3 * h]);
            let w_hh = rand_var(&mut rng, &[h, 3 * h]);
            let b_ih = rand_var(&mut rng, &[3 * h]);
            let b_hh = rand_var(&mut rng, &[3 * h]);
            let reverse = seed % 2 == 1;
            for (name, var) in [
                ("gru_x", &x),
                ("gru_w_ih", &w_ih),
                ("gru_w_hh", &w_hh),
                ("gru_b_ih", &b_ih),
                ("gru_b_hh", &b_hh),
            ] {
                let report = finite_diff_check(name, var, 1e-5, |_| {
                    let y = x.gru(&w_ih, &w_hh, &b_ih, &b_hh, reverse)?;
                    Ok(y.mul(&y)?.sum_all())
                })
                .unwrap();
                assert!(report.passed(), "seed {seed} reverse={reverse}: {report}");
            }
        }
    }

    #[test]
    fn speaker_attention_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let shape = [3usize, 4, 5]; // [speakers, frames, dim]
            let q = rand_var(&mut rng, &shape);
            let k = rand_var(&mut rng, &shape);
            let v = rand_var(&mut rng, &shape);
            let present = match seed % 3 {
                0 => vec![true, true, true],
                1 => vec![true, false, true],
                _ => vec![false, true, false],
            };
            for (name, var) in [("attn_q", &q), ("attn_k", &k), ("attn_v", &v)] {
                let report = finite_diff_check(name, var, 1e-6, |_| {
                    let y = Tensor::speaker_attention(&q, &k, &v, &present)?;
                    Ok(y.mul(&y)?.sum_all())
                })
                .unwrap();
                assert!(
                    report.passed(),
                    "seed {seed} present={present:?}: {report}"
                );
            }
        }
    }

    #[test]
    fn chunking_round_trip_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            let t = 12 + (seed as usize % 5);
            let x = rand_var(&mut rng, &[2, t, 3]);
            let report = finite_diff_check("segment_merge", &x, 1e-6, |x| {
                let chunks = x.segment_chunks(6, 3)?;
                let back = chunks.merge_chunks(3, t)?;
                Ok(back.mul(&back)?.sum_all())
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report}");
        }
    }

    #[test]
    fn reshape_permute_concat_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
            let a = rand_var(&mut rng, &[2, 3, 4]);
            let b = rand_var(&mut rng, &[2, 2, 4]);
            for (name, var) in [("shape_a", &a), ("shape_b", &b)] {
                let report = finite_diff_check(name, var, 1e-6, |_| {
                    let cat = Tensor::concat(&[a.clone(), b.clone()], 1)?;
                    let p = cat.permute(&[1, 0, 2])?;
                    let flat = p.reshape(&[5, 8])?;
                    let cut = flat.narrow(1, 2, 5)?;
                    Ok(cut.mul(&cut)?.sum_all())
                })
                .unwrap();
                assert!(report.passed(), "seed {seed}: {report}");
            }
        }
    }

    #[test]
    fn scale_by_and_repeat_rows_over_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let x = rand_var(&mut rng, &[3, 2]);
            let s = rand_var(&mut rng, &[1]);
            for (name, var) in [("scale_x", &x), ("scale_s", &s)] {
                let report = finite_diff_check(name, var, 1e-6, |_| {
                    let up = x.repeat_rows(4)?;
                    let scaled = up.scale_by(&s)?;
                    Ok(scaled.mul(&scaled)?.mean_all())
                })
                .unwrap();
                assert!(report.passed(), "seed {seed}: {report}");
            }
        }
    }
}
