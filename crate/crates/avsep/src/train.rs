//! Training and evaluation regime for the extractor.
//!
//! The learning-rate schedule ramps linearly over a warmup horizon, then
//! holds at the warmup-end value until validation stalls: the rate is halved
//! after every six non-improving epochs and training stops once sixteen pass
//! without a new best. Each training sample randomly either bypasses the
//! inter-speaker attention path entirely (so the model stays usable with a
//! single face) or drops each co-occurring face independently (so it
//! tolerates partial visibility). Everything is driven by one counter-based
//! generator: a seed fully determines the run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow};
use crate::mixsim::{make_sparse_schedule, mix_sparse, synth_speech_like, MixtureSample};
use crate::model::ExtractorModel;
use crate::tensor::{no_grad, Elem, Tensor};
use crate::visual::{synth_visual, VisualStream};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr_max: f64,
    /// Warmup horizon in optimizer steps.
    pub warmup_n: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs before each halving of the learning rate.
    pub plateau_patience: usize,
    /// Further non-improving epochs (after the first halving threshold)
    /// before training stops.
    pub stop_patience: usize,
    /// Probability that a training sample skips the attention path and
    /// trains the target branch alone.
    pub isam_bypass_prob: f64,
    /// Probability that each co-occurring face is hidden when the
    /// attention path is active.
    pub face_dropout_prob: f64,
    pub seed: u64,
    /// Optional wall-clock cap; the epoch loop winds down once exceeded.
    pub time_budget_s: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.001,
            warmup_n: 15_000,
            batch_size: 8,
            max_epochs: 100,
            plateau_patience: 6,
            stop_patience: 10,
            isam_bypass_prob: 0.5,
            face_dropout_prob: 0.25,
            seed: 0,
            time_budget_s: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_n == 0 {
            return Err(Error::Config("warmup_n must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return Err(Error::Config("patience values must be >= 1".into()));
        }
        for (name, p) in [
            ("isam_bypass_prob", self.isam_bypass_prob),
            ("face_dropout_prob", self.face_dropout_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.lr_max <= 0.0 {
            return Err(Error::Config(format!(
                "lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step_n` (1-based).
///
/// During warmup the rate is `lr_max * 1000 / 8 * step_n * warmup_n^(-3/2)`,
/// linear in the step and reaching `125 * lr_max / sqrt(warmup_n)` at the
/// warmup boundary. Afterwards it holds at that boundary value times the
/// plateau multiplier.
pub fn lr_at(step_n: usize, cfg: &TrainConfig, plateau_multiplier: f64) -> f64 {
    debug_assert!(step_n >= 1, "steps are 1-based");
    let warmup = cfg.warmup_n as f64;
    let ramp = |s: f64| cfg.lr_max * 1000.0 * 0.125 * s * warmup.powf(-1.5);
    if step_n <= cfg.warmup_n {
        ramp(step_n as f64)
    } else {
        ramp(warmup) * plateau_multiplier
    }
}

/// Pure plateau/early-stop state machine over per-epoch validation losses.
///
/// The multiplier halves whenever the count of consecutive non-improving
/// epochs reaches a multiple of the plateau patience, and `stopped` latches
/// once the count reaches plateau patience + stop patience. Improvement
/// means strictly smaller validation loss than the best seen.
#[derive(Debug, Clone)]
pub struct PlateauState {
    plateau_patience: usize,
    stop_patience: usize,
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
    pub multiplier: f64,
    pub stopped: bool,
}

impl PlateauState {
    pub fn new(plateau_patience: usize, stop_patience: usize) -> Self {
        PlateauState {
            plateau_patience,
            stop_patience,
            best: None,
            epochs_since_improvement: 0,
            multiplier: 1.0,
            stopped: false,
        }
    }

    /// Feeds one epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        let improved = self.best.map_or(true, |b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
            self.epochs_since_improvement = 0;
            return true;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement % self.plateau_patience == 0 {
            self.multiplier *= 0.5;
        }
        if self.epochs_since_improvement >= self.plateau_patience + self.stop_patience {
            self.stopped = true;
        }
        false
    }
}

/// Adam with the standard constants (decay 0.9/0.999, eps 1e-8) and bias
/// correction. Moments are kept in 64-bit regardless of the model's element
/// type. Parameters without a gradient this step are treated as having a
/// zero gradient, so momentum still decays.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter, scaling raw accumulated
    /// gradients by `grad_scale` (the mean over a batch is taken here, since
    /// backward passes accumulate sums).
    pub fn step<E: Elem>(
        &mut self,
        params: &[(String, Tensor<E>)],
        lr: f64,
        grad_scale: f64,
    ) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters but was given {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if m.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "parameter {name} changed size under the optimizer"
                )));
            }
            p.update_data(|data| {
                for (j, slot) in data.iter_mut().enumerate() {
                    let g = grad
                        .as_ref()
                        .map_or(0.0, |g| g[j].into_f64() * grad_scale);
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                    *slot = E::of_f64(slot.into_f64() - update);
                }
            });
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

/// Mutable state of a training run: step counter, optimizer moments,
/// plateau counters, and the run's random stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub opt: Adam,
    pub plateau: PlateauState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            step: 0,
            opt: Adam::new(),
            plateau: PlateauState::new(cfg.plateau_patience, cfg.stop_patience),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }
}

/// One dataset entry: a simulated mixture with one visual stream per
/// speaker (target first).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub mix: MixtureSample,
    pub visuals: Vec<VisualStream>,
}

impl TrainSample {
    /// Simulates one sparse conversational sample: per-speaker speech-like
    /// material, a schedule hitting the requested overlap fraction,
    /// interferer SNRs uniform in [-10, 10] dB, and a visual stream per
    /// speaker. Everything derives from `seed`.
    pub fn synth_sparse(
        total_len: usize,
        n_speakers: usize,
        overlap: f64,
        seed: u64,
    ) -> Result<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snrs: Vec<f64> = (1..n_speakers).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let material_s = total_len as f64 / 16_000.0 * (1.0 + overlap) + 0.5;
        let segments: Vec<Vec<f32>> = (0..n_speakers)
            .map(|_| synth_speech_like(rng.gen(), material_s))
            .collect();
        let schedule = make_sparse_schedule(total_len, n_speakers, overlap, rng.gen())?;
        let mix = mix_sparse(&segments, &schedule, &snrs)?;
        let visuals = (0..n_speakers)
            .map(|s| synth_visual(&mix.schedule.intervals[s], &mix.sources[s], rng.gen()))
            .collect();
        Ok(TrainSample { mix, visuals })
    }

    pub fn n_speakers(&self) -> usize {
        self.visuals.len()
    }
}

/// Draws the visibility regime for one training sample: either bypass the
/// attention path (target face only), or keep each co-occurring face
/// independently with probability `1 - face_dropout_prob`. The returned
/// mask covers all `1 + n_interferers` speakers, target first.
pub fn sample_visibility(
    n_interferers: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (bool, Vec<bool>) {
    let mut mask = vec![true; 1 + n_interferers];
    if rng.gen_range(0.0..1.0) < cfg.isam_bypass_prob {
        mask[1..].fill(false);
        return (true, mask);
    }
    for kept in mask[1..].iter_mut() {
        *kept = rng.gen_range(0.0..1.0) >= cfg.face_dropout_prob;
    }
    (false, mask)
}

fn wave_tensor<E: Elem>(wave: &[f32]) -> Result<Tensor<E>> {
    Tensor::from_vec(
        wave.iter().map(|&v| E::of_f64(v as f64)).collect(),
        &[wave.len()],
    )
}

/// Loss of one sample under a given visibility mask: the model sees the
/// unmasked visual streams and is scored against their references.
fn sample_loss<E: Elem>(
    model: &ExtractorModel<E>,
    sample: &TrainSample,
    mask: &[bool],
    bypass: bool,
) -> Result<Tensor<E>> {
    let mixture = wave_tensor::<E>(&sample.mix.mixture)?;
    let mut visuals = Vec::new();
    let mut refs = Vec::new();
    for (s, &keep) in mask.iter().enumerate() {
        if keep {
            visuals.push(sample.visuals[s].clone());
            refs.push(wave_tensor::<E>(&sample.mix.sources[s])?);
        }
    }
    let ests = model.forward(&mixture, &visuals, bypass)?;
    let present = vec![true; refs.len()];
    metrics::loss_multi(&refs, &ests, &present)
}

/// Runs one optimizer step over a batch: per-sample visibility sampling,
/// forward, backward accumulation, then an Adam update at the scheduled
/// rate. Returns the mean batch loss.
pub fn train_step<E: Elem>(
    model: &ExtractorModel<E>,
    batch: &[TrainSample],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step got an empty batch".into()));
    }
    let params = model.visit_params();
    for (_, p) in &params {
        p.zero_grad();
    }
    let mut total = 0.0;
    for sample in batch {
        let (bypass, mask) = sample_visibility(sample.n_speakers() - 1, cfg, &mut state.rng);
        let loss = sample_loss(model, sample, &mask, bypass)?;
        let value = loss.item().into_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {}",
                state.step + 1
            )));
        }
        total += value;
        loss.backward()?;
    }
    state.step += 1;
    let lr = lr_at(state.step, cfg, state.plateau.multiplier);
    state
        .opt
        .step(&params, lr, 1.0 / batch.len() as f64)?;
    Ok(total / batch.len() as f64)
}

/// Mean validation loss with every face visible and attention active.
pub fn validation_loss<E: Elem>(
    model: &ExtractorModel<E>,
    val_set: &[TrainSample],
) -> Result<f64> {
    if val_set.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    no_grad(|| {
        let mut total = 0.0;
        for sample in val_set {
            let mask = vec![true; sample.n_speakers()];
            total += sample_loss(model, sample, &mask, false)?.item().into_f64();
        }
        Ok(total / val_set.len() as f64)
    })
}

/// One line of training history, as later written to the history table.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub multiplier: f64,
}

/// Full training loop: seeded epoch shuffles, per-epoch validation, plateau
/// halving and early stop, and best-validation parameter retention (the
/// model is left holding the best parameters seen, so resuming or
/// finetuning continues from them).
pub fn fit<E: Elem>(
    model: &ExtractorModel<E>,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut state = TrainState::new(cfg)?;
    let params = model.visit_params();
    let mut best_params: Option<Vec<Vec<E>>> = None;
    let mut history = Vec::new();
    let started = std::time::Instant::now();
    let out_of_time = |now: std::time::Instant| {
        cfg.time_budget_s
            .map(|budget| now.duration_since(started).as_secs_f64() > budget)
            .unwrap_or(false)
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        // Seeded Fisher-Yates shuffle of the sample order.
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, state.rng.gen_range(0..=i));
        }

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            epoch_loss += train_step(model, &batch, &mut state, cfg)?;
            n_batches += 1;
            if out_of_time(std::time::Instant::now()) {
                break;
            }
        }

        let val = validation_loss(model, val_set)?;
        let improved = state.plateau.observe(val);
        if improved {
            best_params = Some(params.iter().map(|(_, p)| p.to_vec()).collect());
        }
        history.push(HistoryRow {
            epoch,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_loss: val,
            lr: lr_at(state.step.max(1), cfg, state.plateau.multiplier),
            multiplier: state.plateau.multiplier,
        });
        if state.plateau.stopped || out_of_time(std::time::Instant::now()) {
            break 'epochs;
        }
    }

    if let Some(best) = best_params {
        for ((_, p), data) in params.iter().zip(&best) {
            p.set_data(data);
        }
    }
    Ok(history)
}

/// How many visual streams the evaluator reveals to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    /// Target face only; the attention path is bypassed.
    OneSpk,
    /// Target plus one co-occurring face.
    TwoSpk,
    /// Target plus two co-occurring faces.
    ThreeSpk,
}

impl Visibility {
    pub fn revealed(self) -> usize {
        match self {
            Visibility::OneSpk => 1,
            Visibility::TwoSpk => 2,
            Visibility::ThreeSpk => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Visibility::OneSpk => "1-spk",
            Visibility::TwoSpk => "2-spk",
            Visibility::ThreeSpk => "3-spk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1-spk" => Ok(Visibility::OneSpk),
            "2-spk" => Ok(Visibility::TwoSpk),
            "3-spk" => Ok(Visibility::ThreeSpk),
            other => Err(Error::Config(format!(
                "unknown visibility mode {other:?} (expected 1-spk, 2-spk or 3-spk)"
            ))),
        }
    }
}

/// Evaluates target-speaker improvement on each sample under a visibility
/// mode: the model sees the target's face plus `revealed - 1` co-occurring
/// faces (capped at the speaker count), with attention bypassed in 1-spk
/// mode. Scores are improvements of the target estimate over the raw
/// mixture.
pub fn evaluate<E: Elem>(
    model: &ExtractorModel<E>,
    samples: &[TrainSample],
    mode: Visibility,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(samples.len());
    for (id, sample) in samples.iter().enumerate() {
        let reveal = mode.revealed().min(sample.n_speakers());
        let bypass = reveal == 1;
        let visuals: Vec<VisualStream> = sample.visuals[..reveal].to_vec();
        let ests = model.extract(&sample.mix.mixture, &visuals, bypass)?;
        let to64 = |w: &[f32]| w.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (si_snri, snri) = metrics::improvement(
            &to64(&sample.mix.sources[0]),
            &to64(&ests[0]),
            &to64(&sample.mix.mixture),
        )?;
        rows.push(MetricsRow {
            sample_id: id,
            visibility_mode: mode.label().to_string(),
            si_snri_db: si_snri,
            snri_db: snri,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            warmup_n: 1000,
            batch_size: 2,
            max_epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn mini_model(seed: u64) -> ExtractorModel<f32> {
        ExtractorModel::init(
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
            },
            seed,
        )
        .unwrap()
    }

    fn toy_set(n: usize, seed0: u64) -> Vec<TrainSample> {
        (0..n)
            .map(|i| TrainSample::synth_sparse(16_000, 2, 0.3, seed0 + i as u64).unwrap())
            .collect()
    }

    #[test]
    fn warmup_rate_matches_the_closed_form_on_a_grid() {
        let cfg = TrainConfig::default();
        // Independent evaluation of the published expression
        // lr_max * 0.001^-1 * 64^-0.5 * step * warmup^-1.5.
        let oracle = |step: usize| {
            cfg.lr_max
                * 0.001f64.powi(-1)
                * 64.0f64.powf(-0.5)
                * step as f64
                * (cfg.warmup_n as f64).powf(-1.5)
        };
        for k in 0..100 {
            let step = 1 + k * (cfg.warmup_n - 1) / 99;
            let got = lr_at(step, &cfg, 1.0);
            let want = oracle(step);
            assert!(
                (got - want).abs() <= 1e-12 * want,
                "step {step}: {got} vs {want}"
            );
        }
        assert!((lr_at(15_000, &cfg, 1.0) - 1.02062e-3).abs() < 1e-8);
        assert!((lr_at(1, &cfg, 1.0) - 6.8041e-8).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_exactly_linear_in_the_step() {
        let cfg = TrainConfig::default();
        for k in [1usize, 10, 371, 7_000] {
            assert_eq!(lr_at(2 * k, &cfg, 1.0), 2.0 * lr_at(k, &cfg, 1.0));
        }
    }

    #[test]
    fn rate_holds_after_warmup_and_scales_with_the_multiplier() {
        let cfg = TrainConfig::default();
        let boundary = lr_at(cfg.warmup_n, &cfg, 1.0);
        assert_eq!(lr_at(cfg.warmup_n + 1, &cfg, 1.0), boundary);
        assert_eq!(lr_at(10 * cfg.warmup_n, &cfg, 1.0), boundary);
        assert_eq!(lr_at(cfg.warmup_n + 5, &cfg, 0.25), 0.25 * boundary);
    }

    #[test]
    fn plateau_machine_follows_the_constant_loss_trace() {
        // Constant validation loss: the first epoch sets the best, later
        // epochs never improve. Expect halvings when the stall counter hits
        // 6 and 12 (epochs 7 and 13) and a stop when it hits 16 (epoch 17).
        let mut st = PlateauState::new(6, 10);
        let mut halvings = Vec::new();
        let mut stopped_at = None;
        for epoch in 1..=20 {
            let before = st.multiplier;
            st.observe(1.0);
            if st.multiplier != before {
                halvings.push(epoch);
            }
            if st.stopped {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(halvings, vec![7, 13]);
        assert_eq!(stopped_at, Some(17));
        assert_eq!(st.multiplier, 0.25);
    }

    #[test]
    fn plateau_machine_resets_on_improvement_and_never_raises_the_rate() {
        let mut st = PlateauState::new(6, 10);
        assert!(st.observe(5.0));
        for _ in 0..5 {
            assert!(!st.observe(5.0)); // stall 1..=5, no halving yet
        }
        assert_eq!(st.multiplier, 1.0);
        assert!(st.observe(4.0)); // improvement resets the counter
        assert_eq!(st.epochs_since_improvement, 0);
        for _ in 0..6 {
            st.observe(4.0);
        }
        assert_eq!(st.multiplier, 0.5);
        assert!(!st.stopped);
        // Equal loss is not an improvement.
        assert!(!st.observe(4.0));
    }

    #[test]
    fn strictly_improving_losses_never_halve_or_stop() {
        let mut st = PlateauState::new(6, 10);
        for epoch in 0..30 {
            assert!(st.observe(10.0 - epoch as f64));
        }
        assert_eq!(st.multiplier, 1.0);
        assert!(!st.stopped);
    }

    #[test]
    fn adam_walks_a_quadratic_to_its_minimum() {
        let theta = Tensor::<f64>::var_from_vec(vec![0.0], &[1]).unwrap();
        let params = vec![("theta".to_string(), theta.clone())];
        let mut opt = Adam::new();
        for _ in 0..300 {
            theta.zero_grad();
            let loss = theta.add_scalar(-3.0);
            let loss = loss.mul(&loss).unwrap().sum_all();
            loss.backward().unwrap();
            opt.step(&params, 0.05, 1.0).unwrap();
        }
        let v = theta.to_vec()[0];
        assert!((v - 3.0).abs() < 0.05, "theta={v}");
    }

    #[test]
    fn adam_treats_missing_gradients_as_zero() {
        let a = Tensor::<f64>::var_from_vec(vec![1.0], &[1]).unwrap();
        let b = Tensor::<f64>::var_from_vec(vec![1.0], &[1]).unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let mut opt = Adam::new();
        // Only `a` participates in the graph.
        let loss = a.mul(&a).unwrap().sum_all();
        loss.backward().unwrap();
        opt.step(&params, 0.1, 1.0).unwrap();
        assert_ne!(a.to_vec()[0], 1.0);
        assert_eq!(b.to_vec()[0], 1.0);
    }

    #[test]
    fn visibility_sampling_edge_cases_and_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let always = TrainConfig {
            isam_bypass_prob: 1.0,
            ..TrainConfig::default()
        };
        for _ in 0..20 {
            let (bypass, mask) = sample_visibility(2, &always, &mut rng);
            assert!(bypass);
            assert_eq!(mask, vec![true, false, false]);
        }

        let never = TrainConfig {
            isam_bypass_prob: 0.0,
            face_dropout_prob: 0.0,
            ..TrainConfig::default()
        };
        for _ in 0..20 {
            let (bypass, mask) = sample_visibility(2, &never, &mut rng);
            assert!(!bypass);
            assert_eq!(mask, vec![true, true, true]);
        }

        let cfg = TrainConfig {
            isam_bypass_prob: 0.3,
            ..TrainConfig::default()
        };
        let mut bypasses = 0usize;
        for _ in 0..10_000 {
            if sample_visibility(1, &cfg, &mut rng).0 {
                bypasses += 1;
            }
        }
        let freq = bypasses as f64 / 10_000.0;
        assert!((0.28..=0.32).contains(&freq), "bypass frequency {freq}");
    }

    #[test]
    fn train_step_is_deterministic_given_the_seed() {
        let cfg = toy_config();
        let set = toy_set(4, 100);
        let run = || {
            let model = mini_model(9);
            let mut state = TrainState::new(&cfg).unwrap();
            (0..3)
                .map(|i| {
                    let batch = &set[(2 * i % set.len())..(2 * i % set.len() + 2)];
                    train_step(&model, batch, &mut state, &cfg).unwrap()
                })
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn two_hundred_steps_reduce_the_toy_loss() {
        let cfg = TrainConfig {
            warmup_n: 400,
            batch_size: 2,
            isam_bypass_prob: 0.5,
            face_dropout_prob: 0.25,
            seed: 11,
            ..TrainConfig::default()
        };
        let model = mini_model(3);
        let set = toy_set(8, 300);
        let mut state = TrainState::new(&cfg).unwrap();
        let mut losses = Vec::new();
        for step in 0..200 {
            let a = (2 * step) % set.len();
            let batch = vec![set[a].clone(), set[(a + 1) % set.len()].clone()];
            losses.push(train_step(&model, &batch, &mut state, &cfg).unwrap());
        }
        let head: f64 = losses[..40].iter().sum::<f64>() / 40.0;
        let tail: f64 = losses[160..].iter().sum::<f64>() / 40.0;
        assert!(
            tail < head,
            "smoothed loss did not decrease: head {head:.3} tail {tail:.3}"
        );
    }

    #[test]
    fn fit_records_history_and_restores_the_best_parameters() {
        let cfg = toy_config();
        let model = mini_model(4);
        let train = toy_set(6, 500);
        let val = toy_set(2, 900);
        let history = fit(&model, &train, &val, &cfg).unwrap();
        assert_eq!(history.len(), cfg.max_epochs); // no early stop in 4 epochs
        for (i, row) in history.iter().enumerate() {
            assert_eq!(row.epoch, i + 1);
            assert!(row.train_loss.is_finite() && row.val_loss.is_finite());
        }
        // The model was left at the best-validation parameters: scoring it
        // again reproduces the best recorded validation loss.
        let best = history
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        let reval = validation_loss(&model, &val).unwrap();
        assert!(
            (reval - best).abs() < 1e-6,
            "revalidated {reval} vs best {best}"
        );
    }

    #[test]
    fn evaluate_emits_one_row_per_sample_with_the_mode_label() {
        let model = mini_model(8);
        let set = toy_set(3, 700);
        for mode in [Visibility::OneSpk, Visibility::TwoSpk] {
            let rows = evaluate(&model, &set, mode).unwrap();
            assert_eq!(rows.len(), 3);
            for (i, row) in rows.iter().enumerate() {
                assert_eq!(row.sample_id, i);
                assert_eq!(row.visibility_mode, mode.label());
                assert!(row.si_snri_db.is_finite() && row.snri_db.is_finite());
            }
        }
    }

    #[test]
    fn visibility_parsing() {
        assert_eq!(Visibility::parse("1-spk").unwrap(), Visibility::OneSpk);
        assert_eq!(Visibility::parse("3-spk").unwrap(), Visibility::ThreeSpk);
        assert!(matches!(
            Visibility::parse("4-spk").unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn config_validation_rejects_bad_probabilities() {
        let mut cfg = TrainConfig::default();
        cfg.isam_bypass_prob = 1.5;
        assert!(matches!(cfg.validate().unwrap_err(), Error::Config(_)));
        cfg.isam_bypass_prob = 0.5;
        cfg.warmup_n = 0;
        assert!(matches!(cfg.validate().unwrap_err(), Error::Config(_)));
    }
}
