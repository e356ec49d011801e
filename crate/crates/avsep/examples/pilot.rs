//! Scratch calibration harness for the directional training experiment.
//! Replicates the fit() loop but scores held-out visibility modes after
//! every epoch (eval time excluded from the training budget). Not part of
//! the test suite. Optional args 12-15 add a second fine-tuning stage.

use rand::Rng;

use avsep::model::{ExtractorModel, ModelConfig};
use avsep::train::{
    evaluate, train_step, validation_loss, TrainConfig, TrainSample, TrainState, Visibility,
};

#[allow(clippy::too_many_arguments)]
fn run_stage(
    label: &str,
    model: &ExtractorModel<f32>,
    cfg: &TrainConfig,
    budget_s: f64,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    eval_set: &[TrainSample],
    visits0: usize,
    eval_every: usize,
) -> usize {
    let mean_si = |mode: Visibility| -> f64 {
        let rows = evaluate(model, eval_set, mode).unwrap();
        rows.iter().map(|r| r.si_snri_db).sum::<f64>() / rows.len() as f64
    };
    let mut state = TrainState::new(cfg).unwrap();
    let mut trained_s = 0.0f64;
    let mut visits = visits0;
    let mut next_probe = visits0 + eval_every;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, state.rng.gen_range(0..=i));
        }
        let mut t = std::time::Instant::now();
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            epoch_loss += train_step(model, &batch, &mut state, cfg).unwrap();
            n_batches += 1;
            visits += chunk.len();
            if eval_every > 0 && visits >= next_probe {
                // Probe held-out gap mid-epoch; probe time excluded from budget.
                trained_s += t.elapsed().as_secs_f64();
                let val = validation_loss(model, val_set).unwrap();
                let one = mean_si(Visibility::OneSpk);
                let two = mean_si(Visibility::TwoSpk);
                eprintln!(
                    "{label} probe visits={visits} val={val:.3} one={one:.3} two={two:.3} gap={:+.3} trained_s={trained_s:.0}",
                    two - one,
                );
                next_probe += eval_every;
                t = std::time::Instant::now();
            }
            if trained_s + t.elapsed().as_secs_f64() > budget_s {
                break;
            }
        }
        let val = validation_loss(model, val_set).unwrap();
        state.plateau.observe(val);
        trained_s += t.elapsed().as_secs_f64();

        let one = mean_si(Visibility::OneSpk);
        let two = mean_si(Visibility::TwoSpk);
        eprintln!(
            "{label} epoch={epoch} visits={visits} train={:.3} val={val:.3} one={one:.3} two={two:.3} gap={:+.3} trained_s={trained_s:.0}",
            epoch_loss / n_batches.max(1) as f64,
            two - one,
        );
        if state.plateau.stopped || trained_s > budget_s {
            break;
        }
    }
    visits
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let n_train = get(1, 160.0) as usize;
    let n_val = get(2, 16.0) as usize;
    let budget_s = get(3, 360.0);
    let batch = get(4, 2.0) as usize;
    let warmup = get(5, 60.0) as usize;
    let lr_max = get(6, 8e-5);
    let seed = get(7, 1.0) as u64;
    let n_eval = get(8, 40.0) as usize;
    let max_epochs = get(9, 50.0) as usize;
    let bypass_prob = get(10, 0.5);
    let face_dropout = get(11, 0.25);
    let s2_budget_s = get(12, 0.0);
    let s2_bypass = get(13, 0.15);
    let s2_lr_max = get(14, lr_max);
    let s2_warmup = get(15, warmup as f64) as usize;
    let eval_every = get(16, 0.0) as usize;

    let t0 = std::time::Instant::now();
    let make = |tag: u64, n: usize| -> Vec<TrainSample> {
        (0..n)
            .map(|i| TrainSample::synth_sparse(32_000, 2, 0.3, tag * 1_000_003 + i as u64).unwrap())
            .collect()
    };
    let train_set = make(seed * 10 + 1, n_train);
    let val_set = make(seed * 10 + 2, n_val);
    let eval_set = make(seed * 10 + 3, n_eval);
    eprintln!("data generated in {:.1} s", t0.elapsed().as_secs_f64());

    let model = ExtractorModel::<f32>::init(ModelConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        lr_max,
        warmup_n: warmup,
        batch_size: batch,
        max_epochs,
        seed,
        isam_bypass_prob: bypass_prob,
        face_dropout_prob: face_dropout,
        ..TrainConfig::default()
    };

    let visits = run_stage(
        "s1", &model, &cfg, budget_s, &train_set, &val_set, &eval_set, 0, eval_every,
    );
    if s2_budget_s > 0.0 {
        let cfg2 = TrainConfig {
            lr_max: s2_lr_max,
            warmup_n: s2_warmup,
            isam_bypass_prob: s2_bypass,
            seed: seed + 17,
            ..cfg.clone()
        };
        run_stage(
            "s2", &model, &cfg2, s2_budget_s, &train_set, &val_set, &eval_set, visits, eval_every,
        );
    }
    eprintln!("total {:.1} s", t0.elapsed().as_secs_f64());
}
