//! Extraction quality: scale-invariant SNR, plain SNR, their improvements
//! over the unprocessed mixture, and the training loss built from them.
//!
//! The scale-invariant ratio projects the estimate onto the reference and
//! compares projection energy against residual energy:
//! `10·log10(|α·s|² / |ŝ − α·s|²)` with `α = ⟨ŝ,s⟩ / |s|²`. Values are
//! capped to ±60 dB and denominators guarded by a small epsilon so
//! collinear or silent estimates stay finite. No mean removal is applied:
//! the definition is used exactly as written, so `s=[1,0], est=[1,1]`
//! scores 0 dB (unit projection, unit residual).

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Guard for denominators in ratio computations.
pub const EPS: f64 = 1e-8;
/// Symmetric cap applied to all dB values.
pub const CAP_DB: f64 = 60.0;

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| acc + x * y)
}

fn check_lengths(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op,
            msg: format!("waveform lengths differ: {} vs {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// Scale-invariant SNR of `estimate` against `reference`, in dB.
///
/// Computed in 64-bit; callers holding 32-bit waveforms widen them first
/// (the conversion is exact).
pub fn si_snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths("si_snr", reference, estimate)?;
    let es = dot64(reference, reference);
    if es <= 0.0 {
        return Err(Error::DegenerateReference(
            "si_snr reference has zero energy".into(),
        ));
    }
    let alpha = dot64(estimate, reference) / es.max(EPS);
    let ep = alpha * alpha * es;
    let er = reference.iter().zip(estimate).fold(0.0f64, |acc, (&s, &e)| {
        let r = e - alpha * s;
        acc + r * r
    });
    Ok((10.0 * (ep / er.max(EPS)).log10()).clamp(-CAP_DB, CAP_DB))
}

/// Plain SNR (no projection): `10·log10(|s|² / |est − s|²)`, capped.
pub fn snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths("snr", reference, estimate)?;
    let es = dot64(reference, reference);
    if es <= 0.0 {
        return Err(Error::DegenerateReference(
            "snr reference has zero energy".into(),
        ));
    }
    let er = reference.iter().zip(estimate).fold(0.0f64, |acc, (&s, &e)| {
        let r = e - s;
        acc + r * r
    });
    Ok((10.0 * (es / er.max(EPS)).log10()).clamp(-CAP_DB, CAP_DB))
}

/// Improvement of the estimate over the raw mixture:
/// `(si_snri, snri)` where each term is `metric(ref, est) − metric(ref, mix)`.
pub fn improvement(reference: &[f64], estimate: &[f64], mixture: &[f64]) -> Result<(f64, f64)> {
    let si = si_snr(reference, estimate)? - si_snr(reference, mixture)?;
    let sn = snr(reference, estimate)? - snr(reference, mixture)?;
    Ok((si, sn))
}

/// Differentiable negative SI-SNR of one (reference, estimate) pair.
///
/// The reference enters as plain data; gradients flow only into the
/// estimate's graph. Values at the ±60 dB cap contribute zero gradient.
pub fn si_snr_loss<E: Elem>(reference: &Tensor<E>, estimate: &Tensor<E>) -> Result<Tensor<E>> {
    if reference.shape() != estimate.shape() {
        return Err(Error::ShapeMismatch {
            op: "si_snr_loss",
            lhs: reference.shape().to_vec(),
            rhs: estimate.shape().to_vec(),
        });
    }
    let es: f64 = reference.to_f64_vec().iter().map(|v| v * v).sum();
    if es <= 0.0 {
        return Err(Error::DegenerateReference(
            "si_snr_loss reference has zero energy".into(),
        ));
    }
    let dot = estimate.mul(reference)?.sum_all();
    let alpha = dot.scale(1.0 / es.max(EPS));
    let proj = reference.scale_by(&alpha)?;
    let res = estimate.sub(&proj)?;
    let ep = proj.mul(&proj)?.sum_all().add_scalar(EPS);
    let er = res.mul(&res)?.sum_all().add_scalar(EPS);
    let db = ep
        .div(&er)?
        .ln()
        .scale(10.0 / std::f64::consts::LN_10);
    Ok(db.clamp(-CAP_DB, CAP_DB).neg())
}

/// Training objective: mean negative SI-SNR over the present speakers.
pub fn loss_multi<E: Elem>(
    refs: &[Tensor<E>],
    ests: &[Tensor<E>],
    present: &[bool],
) -> Result<Tensor<E>> {
    if refs.len() != ests.len() || refs.len() != present.len() {
        return Err(Error::Dimension {
            op: "loss_multi",
            msg: format!(
                "got {} references, {} estimates, {} presence flags",
                refs.len(),
                ests.len(),
                present.len()
            ),
        });
    }
    let mut acc: Option<Tensor<E>> = None;
    let mut n = 0usize;
    for ((r, e), &p) in refs.iter().zip(ests).zip(present) {
        if !p {
            continue;
        }
        let term = si_snr_loss(r, e)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
        n += 1;
    }
    match acc {
        Some(a) => Ok(a.scale(1.0 / n as f64)),
        None => Err(Error::Contract(
            "loss_multi called with no present speakers".into(),
        )),
    }
}

/// One line of an evaluation results table: target-speaker improvements
/// for one sample under one visibility mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub sample_id: usize,
    pub visibility_mode: String,
    pub si_snri_db: f64,
    pub snri_db: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_case_unit_projection_unit_residual() {
        // s=[1,0], est=[1,1]: alpha=1, projection [1,0], residual [0,1],
        // energies equal -> exactly 0 dB.
        let v = si_snr(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn collinear_estimate_hits_positive_cap() {
        let v = si_snr(&[1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_eq!(v, CAP_DB);
    }

    #[test]
    fn silent_estimate_hits_negative_cap() {
        let v = si_snr(&[1.0, 0.5], &[0.0, 0.0]).unwrap();
        assert_eq!(v, -CAP_DB);
    }

    #[test]
    fn zero_reference_is_rejected() {
        assert!(matches!(
            si_snr(&[0.0; 4], &[1.0; 4]),
            Err(Error::DegenerateReference(_))
        ));
        assert!(matches!(
            snr(&[0.0; 4], &[1.0; 4]),
            Err(Error::DegenerateReference(_))
        ));
    }

    #[test]
    fn scale_invariance_across_three_decades() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let est: Vec<f64> = s
            .iter()
            .map(|&v| 0.8 * v + 0.1 * rng.gen_range(-1.0f64..1.0))
            .collect();
        let base = si_snr(&s, &est).unwrap();
        for c in [0.1f64, 1.0, 10.0] {
            let scaled: Vec<f64> = est.iter().map(|&v| c * v).collect();
            let v = si_snr(&s, &scaled).unwrap();
            assert!(
                (v - base).abs() < 1e-9,
                "c={c}: {v} vs {base} (diff {})",
                (v - base).abs()
            );
        }
    }

    #[test]
    fn orthogonal_equal_energy_noise_scores_zero() {
        // Noise on disjoint support with the same sample values has exactly
        // equal energy and exactly zero inner product with the signal.
        let s = [0.3f64, -0.7, 0.2, 0.0, 0.0, 0.0];
        let n = [0.0f64, 0.0, 0.0, 0.3, -0.7, 0.2];
        let est: Vec<f64> = s.iter().zip(&n).map(|(&a, &b)| a + b).collect();
        let v = si_snr(&s, &est).unwrap();
        assert!(v.abs() < 1e-9, "got {v}");
    }

    #[test]
    fn improvement_of_mixture_itself_is_zero() {
        let s = [0.5f64, -0.25, 0.125, 0.0];
        let m = [0.4f64, 0.1, -0.3, 0.2];
        let (si, sn) = improvement(&s, &m, &m).unwrap();
        assert_eq!(si, 0.0);
        assert_eq!(sn, 0.0);
    }

    #[test]
    fn partial_denoising_improvement_matches_closed_form() {
        // s = [2,0,0,0], mixture adds orthogonal unit noise; the estimate
        // halves that noise. Residual energy drops 1 -> 1/4, so both
        // improvements equal 10*log10(4).
        let s = [2.0f64, 0.0, 0.0, 0.0];
        let m = [2.0f64, 1.0, 0.0, 0.0];
        let est = [2.0f64, 0.5, 0.0, 0.0];
        let (si, sn) = improvement(&s, &est, &m).unwrap();
        let expect = 10.0 * 4.0f64.log10();
        assert!((si - expect).abs() < 1e-9, "si {si} vs {expect}");
        assert!((sn - expect).abs() < 1e-9, "sn {sn} vs {expect}");
    }

    #[test]
    fn perfect_estimate_improvement_is_cap_minus_mixture_score() {
        let s = [0.6f64, -0.2, 0.4, 0.1];
        let m = [0.5f64, 0.3, -0.1, 0.2];
        let (si, _) = improvement(&s, &s, &m).unwrap();
        let mix_score = si_snr(&s, &m).unwrap();
        assert_abs_diff_eq!(si, CAP_DB - mix_score, epsilon = 1e-12);
    }

    #[test]
    fn loss_single_speaker_equals_negative_si_snr() {
        let r = Tensor::<f64>::from_f64_slice(&[1.0, 0.0], &[2]).unwrap();
        let e = Tensor::<f64>::from_f64_slice(&[1.0, 1.0], &[2]).unwrap();
        let loss = loss_multi(&[r], &[e], &[true]).unwrap();
        assert_abs_diff_eq!(loss.item(), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn loss_two_speakers_averages_hand_values() {
        // Speaker A scores 0 dB, speaker B 10 dB (residual energy is a
        // tenth of the projection energy) -> mean negative value -5.
        let ra = Tensor::<f64>::from_f64_slice(&[1.0, 0.0], &[2]).unwrap();
        let ea = Tensor::<f64>::from_f64_slice(&[1.0, 1.0], &[2]).unwrap();
        let rb = Tensor::<f64>::from_f64_slice(&[1.0, 0.0], &[2]).unwrap();
        let eb =
            Tensor::<f64>::from_f64_slice(&[1.0, 0.1f64.sqrt()], &[2]).unwrap();
        let loss = loss_multi(&[ra, rb], &[ea, eb], &[true, true]).unwrap();
        assert_abs_diff_eq!(loss.item(), -5.0, epsilon = 1e-6);
    }

    #[test]
    fn loss_ignores_absent_speakers() {
        let ra = Tensor::<f64>::from_f64_slice(&[1.0, 0.0], &[2]).unwrap();
        let ea = Tensor::<f64>::from_f64_slice(&[1.0, 1.0], &[2]).unwrap();
        let rb = Tensor::<f64>::from_f64_slice(&[1.0, 0.0], &[2]).unwrap();
        let eb = Tensor::<f64>::from_f64_slice(&[9.0, 9.0], &[2]).unwrap();
        let loss = loss_multi(&[ra, rb], &[ea, eb], &[true, false]).unwrap();
        assert_abs_diff_eq!(loss.item(), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn loss_with_no_present_speakers_is_rejected() {
        let r = Tensor::<f64>::from_f64_slice(&[1.0, 0.0], &[2]).unwrap();
        let e = Tensor::<f64>::from_f64_slice(&[1.0, 1.0], &[2]).unwrap();
        assert!(matches!(
            loss_multi(&[r], &[e], &[false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn perfect_estimate_loss_sits_at_cap() {
        let r = Tensor::<f64>::from_f64_slice(&[0.4, -0.3, 0.2], &[3]).unwrap();
        let e = r.detach();
        let loss = loss_multi(&[r], &[e], &[true]).unwrap();
        assert_eq!(loss.item(), -CAP_DB);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let n = 16;
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = r
                .iter()
                .map(|&v| 0.7 * v + 0.3 * rng.gen_range(-1.0..1.0))
                .collect();
            let reference = Tensor::<f64>::from_vec(r, &[n]).unwrap();
            let est = Tensor::<f64>::var_from_vec(e, &[n]).unwrap();
            let report = finite_diff_check("si_snr_loss", &est, 1e-6, |est| {
                loss_multi(&[reference.clone()], &[est.clone()], &[true])
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report}");
        }
    }

    proptest! {
        #[test]
        fn orthogonal_noise_property(
            seed in 0u64..1000,
            half in 4usize..32,
        ) {
            // Build s on the first half, noise as a sign-flipped copy of s
            // on the second half: exactly orthogonal, exactly equal energy.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = vec![0.0f64; 2 * half];
            let mut noise = vec![0.0f64; 2 * half];
            for i in 0..half {
                let v: f64 = rng.gen_range(0.1..1.0);
                s[i] = v;
                noise[half + i] = -v;
            }
            let est: Vec<f64> = s.iter().zip(&noise).map(|(&a, &b)| a + b).collect();
            let v = si_snr(&s, &est).unwrap();
            prop_assert!(v.abs() < 1e-9, "{v}");
        }

        #[test]
        fn scale_invariance_property(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
            let est: Vec<f64> = s.iter().map(|&v| v + 0.2 * rng.gen_range(-1.0f64..1.0)).collect();
            let base = si_snr(&s, &est).unwrap();
            prop_assume!(base.abs() < CAP_DB - 1.0);
            for c in [0.1f64, 10.0] {
                let scaled: Vec<f64> = est.iter().map(|&v| c * v).collect();
                prop_assert!((si_snr(&s, &scaled).unwrap() - base).abs() < 1e-9);
            }
        }
    }
}
