//! Scratch harness replicating the directional-training acceptance case
//! exactly (same data tags, split, fit call, and 100-sample eval), with the
//! training history printed for diagnosis. Not part of the test suite.
//! Args: seed [max_epochs] [budget_s] [bypass] [face_dropout] [lr_max] [warmup]

use avsep::model::{ExtractorModel, ModelConfig};
use avsep::train::{evaluate, fit, TrainConfig, TrainSample, Visibility};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let seed = get(1, 1.0) as u64;
    let max_epochs = get(2, 2.0) as usize;
    let budget_s = get(3, 1700.0);
    let bypass = get(4, 0.35);
    let face_dropout = get(5, 0.0);
    let lr_max = get(6, 8e-5);
    let warmup = get(7, 60.0) as usize;

    const N_TRAIN: usize = 500;
    const N_VAL: usize = 24;
    const N_EVAL: usize = 100;
    const CLIP_LEN: usize = 32_000;

    let synth_set = |tag: u64, count: usize| -> Vec<TrainSample> {
        (0..count)
            .map(|i| {
                TrainSample::synth_sparse(CLIP_LEN, 2, 0.3, tag * 1_000_003 + i as u64).unwrap()
            })
            .collect()
    };

    let data = synth_set(seed * 10 + 1, N_TRAIN);
    let eval_set = synth_set(seed * 10 + 3, N_EVAL);
    let (train_set, val_set) = data.split_at(N_TRAIN - N_VAL);
    eprintln!("seed {seed}: data ready");

    let model = ExtractorModel::<f32>::init(ModelConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        lr_max,
        warmup_n: warmup,
        batch_size: 2,
        max_epochs,
        time_budget_s: Some(budget_s),
        isam_bypass_prob: bypass,
        face_dropout_prob: face_dropout,
        seed,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let history = fit(&model, train_set, val_set, &cfg).unwrap();
    let train_s = started.elapsed().as_secs_f64();
    for row in &history {
        eprintln!(
            "  epoch {} train {:+.3} val {:+.3} lr {:.2e}",
            row.epoch, row.train_loss, row.val_loss, row.lr
        );
    }

    let mean_si = |mode: Visibility| -> f64 {
        let rows = evaluate(&model, &eval_set, mode).unwrap();
        rows.iter().map(|r| r.si_snri_db).sum::<f64>() / rows.len() as f64
    };
    let one = mean_si(Visibility::OneSpk);
    let two = mean_si(Visibility::TwoSpk);
    let ok = one > 0.0 && two >= one + 1.0;
    eprintln!(
        "seed {seed}: 1-spk {one:+.3} dB, 2-spk {two:+.3} dB, gap {:+.3} dB, {} epochs in {train_s:.0} s -> {}",
        two - one,
        history.len(),
        if ok { "pass" } else { "fail" }
    );
}
