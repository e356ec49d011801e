//! Multi-talker mixture simulation.
//!
//! Two regimes: dense mixing (everyone talks the whole time; clips are
//! truncated to the shortest and summed) and sparse mixing (speakers take
//! turns per an [`ActivitySchedule`], overlapping only at turn boundaries).
//! Interferer gains are set so the measured SNR matches the request
//! exactly: over full clips in dense mode, over each speaker's own active
//! samples (mean power) in sparse mode, since counting a speaker's silence
//! as signal would deflate its energy.
//!
//! Everything is a pure function of its arguments; randomness comes only
//! from explicit seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Audio sample rate for all simulated material.
pub const SAMPLE_RATE: u32 = 16_000;

/// Shortest turn the sparse scheduler will emit (0.1 s).
const MIN_TURN: usize = 1_600;
/// Turn-length jitter range as a fraction of the mean turn length.
const JITTER_LO: f64 = 0.85;
const JITTER_HI: f64 = 1.15;
/// Cap on the overlap at one turn boundary, as a fraction of the shorter
/// adjacent turn. Keeping boundary overlaps below half a turn guarantees
/// no sample has three simultaneously active speakers and no speaker
/// overlaps itself.
const OVERLAP_CAP: f64 = 0.45;
/// Maximum number of round-robin rounds.
const MAX_ROUNDS: usize = 3;

/// Per-speaker activity as sorted, non-overlapping half-open intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivitySchedule {
    /// `intervals[s]` lists `(start, end)` sample ranges for speaker `s`.
    pub intervals: Vec<Vec<(usize, usize)>>,
    pub total_len: usize,
}

impl ActivitySchedule {
    pub fn n_speakers(&self) -> usize {
        self.intervals.len()
    }

    /// Checks the structural invariants; hand-built schedules go through
    /// this before mixing.
    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::Scheduling("schedule has no speakers".into()));
        }
        for (s, ivs) in self.intervals.iter().enumerate() {
            if ivs.is_empty() {
                return Err(Error::Scheduling(format!(
                    "speaker {s} has no active interval"
                )));
            }
            let mut prev_end = 0usize;
            for &(start, end) in ivs {
                if start >= end || end > self.total_len {
                    return Err(Error::Scheduling(format!(
                        "speaker {s} interval [{start}, {end}) out of bounds for len {}",
                        self.total_len
                    )));
                }
                if start < prev_end {
                    return Err(Error::Scheduling(format!(
                        "speaker {s} intervals overlap or are unsorted at [{start}, {end})"
                    )));
                }
                prev_end = end;
            }
        }
        Ok(())
    }

    /// Number of simultaneously active speakers at every sample.
    pub fn active_counts(&self) -> Vec<u16> {
        let mut counts = vec![0u16; self.total_len];
        for ivs in &self.intervals {
            for &(start, end) in ivs {
                for c in &mut counts[start..end] {
                    *c += 1;
                }
            }
        }
        counts
    }

    /// Fraction of samples where at least two speakers are active.
    pub fn overlap_fraction(&self) -> f64 {
        if self.total_len == 0 {
            return 0.0;
        }
        let overlapped = self.active_counts().iter().filter(|&&c| c >= 2).count();
        overlapped as f64 / self.total_len as f64
    }

    /// Total active samples for one speaker.
    pub fn active_len(&self, speaker: usize) -> usize {
        self.intervals[speaker]
            .iter()
            .map(|&(s, e)| e - s)
            .sum()
    }
}

/// A simulated mixture with its ground truth.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub mixture: Vec<f32>,
    /// Per-speaker clean waveforms, each `total_len` long and zero outside
    /// the speaker's activity. Index 0 is the target.
    pub sources: Vec<Vec<f32>>,
    pub schedule: ActivitySchedule,
    /// Requested SNR of the target against each interferer, in dB.
    pub snrs_db: Vec<f64>,
    pub sample_rate: u32,
}

fn energy(x: &[f32]) -> f64 {
    x.iter().fold(0.0f64, |acc, &v| acc + v as f64 * v as f64)
}

/// Gain `g` such that `10·log10(E_target / E_{g·interferer}) == snr_db`.
pub fn snr_scale(target: &[f32], interferer: &[f32], snr_db: f64) -> Result<f64> {
    let et = energy(target);
    let ei = energy(interferer);
    if et <= 0.0 {
        return Err(Error::DegenerateSource(
            "snr_scale target has zero energy".into(),
        ));
    }
    if ei <= 0.0 {
        return Err(Error::DegenerateSource(
            "snr_scale interferer has zero energy".into(),
        ));
    }
    Ok((et / ei).sqrt() * 10f64.powf(-snr_db / 20.0))
}

/// Dense mixing: truncate all clips to the shortest, scale interferers to
/// the requested SNRs against the target, and sum. All speakers are active
/// over the full mixture length.
pub fn mix_dense(clips: &[Vec<f32>], snrs_db: &[f64]) -> Result<MixtureSample> {
    if clips.len() < 2 {
        return Err(Error::Contract(format!(
            "mix_dense needs at least 2 clips, got {}",
            clips.len()
        )));
    }
    if snrs_db.len() != clips.len() - 1 {
        return Err(Error::Dimension {
            op: "mix_dense",
            msg: format!(
                "{} clips need {} interferer SNRs, got {}",
                clips.len(),
                clips.len() - 1,
                snrs_db.len()
            ),
        });
    }
    let len = clips.iter().map(Vec::len).min().unwrap();
    if len == 0 {
        return Err(Error::DegenerateSource("mix_dense got an empty clip".into()));
    }
    let target: Vec<f32> = clips[0][..len].to_vec();
    let mut sources = vec![target];
    for (clip, &snr) in clips[1..].iter().zip(snrs_db) {
        let gain = snr_scale(&sources[0], &clip[..len], snr)?;
        sources.push(clip[..len].iter().map(|&v| (v as f64 * gain) as f32).collect());
    }
    let mixture = sum_sources(&sources, len);
    let schedule = ActivitySchedule {
        intervals: vec![vec![(0, len)]; clips.len()],
        total_len: len,
    };
    Ok(MixtureSample {
        mixture,
        sources,
        schedule,
        snrs_db: snrs_db.to_vec(),
        sample_rate: SAMPLE_RATE,
    })
}

fn sum_sources(sources: &[Vec<f32>], len: usize) -> Vec<f32> {
    let mut mixture = vec![0.0f32; len];
    for src in sources {
        for (m, &v) in mixture.iter_mut().zip(src) {
            *m += v;
        }
    }
    mixture
}

/// Builds a turn-taking schedule whose measured overlap fraction equals the
/// request to within one sample.
///
/// Speakers talk round-robin; consecutive turns overlap at their boundary
/// by amounts that sum to `round(overlap_fraction · total_len)`. Boundary
/// overlaps involve exactly two speakers, so the overlapped-sample count is
/// that sum, exactly.
pub fn make_sparse_schedule(
    total_len: usize,
    n_speakers: usize,
    overlap_fraction: f64,
    seed: u64,
) -> Result<ActivitySchedule> {
    if n_speakers < 2 {
        return Err(Error::Scheduling(format!(
            "sparse schedule needs at least 2 speakers, got {n_speakers}"
        )));
    }
    if !(0.0..=1.0).contains(&overlap_fraction) {
        return Err(Error::Scheduling(format!(
            "overlap fraction {overlap_fraction} outside [0, 1]"
        )));
    }
    let overlap_target = (overlap_fraction * total_len as f64).round() as usize;
    let budget = total_len + overlap_target; // sum of all turn lengths
    let min_mean_turn = (MIN_TURN as f64 / JITTER_LO).ceil() as usize;
    let rounds = (budget / (n_speakers * min_mean_turn)).min(MAX_ROUNDS);
    if rounds == 0 {
        return Err(Error::Scheduling(format!(
            "{total_len} samples cannot host {n_speakers} speakers at \
             {MIN_TURN}-sample minimum turns"
        )));
    }
    let n_turns = rounds * n_speakers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Jittered integer partition of the budget into turn lengths
    // (largest-remainder rounding keeps the sum exact).
    let weights: Vec<f64> = (0..n_turns)
        .map(|_| rng.gen_range(JITTER_LO..JITTER_HI))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mut turns: Vec<usize> = weights
        .iter()
        .map(|w| (w / wsum * budget as f64).floor() as usize)
        .collect();
    let mut short = budget - turns.iter().sum::<usize>();
    for t in turns.iter_mut() {
        if short == 0 {
            break;
        }
        *t += 1;
        short -= 1;
    }

    // Distribute the overlap budget over turn boundaries, respecting the
    // per-boundary cap. Round-robin so leftovers spread evenly.
    let caps: Vec<usize> = turns
        .windows(2)
        .map(|w| (OVERLAP_CAP * w[0].min(w[1]) as f64).floor() as usize)
        .collect();
    let mut overlaps = vec![0usize; n_turns - 1];
    let mut remaining = overlap_target;
    while remaining > 0 {
        let mut placed = false;
        for (o, &cap) in overlaps.iter_mut().zip(&caps) {
            if remaining == 0 {
                break;
            }
            if *o < cap {
                let add = remaining.min(cap - *o).min(1 + cap / 8);
                *o += add;
                remaining -= add;
                placed = true;
            }
        }
        if !placed {
            return Err(Error::Scheduling(format!(
                "overlap fraction {overlap_fraction} infeasible for \
                 {total_len} samples and {n_speakers} speakers"
            )));
        }
    }

    let mut intervals = vec![Vec::new(); n_speakers];
    let mut start = 0usize;
    for (k, &t) in turns.iter().enumerate() {
        intervals[k % n_speakers].push((start, start + t));
        start += t;
        if k < n_turns - 1 {
            start -= overlaps[k];
        }
    }
    debug_assert_eq!(start, total_len);
    let schedule = ActivitySchedule {
        intervals,
        total_len,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Sparse mixing: fills each speaker's intervals from its source material,
/// scales interferers so the requested SNR holds over active samples (mean
/// power), and sums.
pub fn mix_sparse(
    segments: &[Vec<f32>],
    schedule: &ActivitySchedule,
    snrs_db: &[f64],
) -> Result<MixtureSample> {
    schedule.validate()?;
    let n = schedule.n_speakers();
    if segments.len() != n {
        return Err(Error::Dimension {
            op: "mix_sparse",
            msg: format!("{} source segments for {} scheduled speakers", segments.len(), n),
        });
    }
    if snrs_db.len() != n - 1 {
        return Err(Error::Dimension {
            op: "mix_sparse",
            msg: format!("{n} speakers need {} interferer SNRs, got {}", n - 1, snrs_db.len()),
        });
    }
    let mut sources = Vec::with_capacity(n);
    for (s, material) in segments.iter().enumerate() {
        let needed = schedule.active_len(s);
        if material.len() < needed {
            return Err(Error::Scheduling(format!(
                "speaker {s} needs {needed} source samples, only {} available",
                material.len()
            )));
        }
        let mut wave = vec![0.0f32; schedule.total_len];
        let mut cursor = 0usize;
        for &(start, end) in &schedule.intervals[s] {
            let len = end - start;
            wave[start..end].copy_from_slice(&material[cursor..cursor + len]);
            cursor += len;
        }
        sources.push(wave);
    }
    // Mean power over each speaker's own active region.
    fn active_power(sources: &[Vec<f32>], schedule: &ActivitySchedule, s: usize) -> Result<f64> {
        let mut e = 0.0f64;
        for &(start, end) in &schedule.intervals[s] {
            e += energy(&sources[s][start..end]);
        }
        let p = e / schedule.active_len(s) as f64;
        if p <= 0.0 {
            return Err(Error::DegenerateSource(format!(
                "speaker {s} is silent over its active region"
            )));
        }
        Ok(p)
    }
    let p_target = active_power(&sources, schedule, 0)?;
    for i in 1..n {
        let p_i = active_power(&sources, schedule, i)?;
        let gain = (p_target / p_i).sqrt() * 10f64.powf(-snrs_db[i - 1] / 20.0);
        for v in sources[i].iter_mut() {
            *v = (*v as f64 * gain) as f32;
        }
    }
    let mixture = sum_sources(&sources, schedule.total_len);
    Ok(MixtureSample {
        mixture,
        sources,
        schedule: schedule.clone(),
        snrs_db: snrs_db.to_vec(),
        sample_rate: SAMPLE_RATE,
    })
}

/// Deterministic pseudo-speech: a seeded harmonic stack (fundamental 80 to
/// 300 Hz with slow vibrato) amplitude-modulated by a seeded 2 to 8 Hz
/// syllabic envelope, peak-normalized to 0.5.
pub fn synth_speech_like(seed: u64, duration_s: f64) -> Vec<f32> {
    assert!(duration_s >= 0.5, "synth_speech_like needs at least 0.5 s");
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0: f64 = rng.gen_range(80.0..300.0);
    let vib_rate: f64 = rng.gen_range(0.2..1.0);
    let vib_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let vib_depth = 0.06;
    let syl_rate: f64 = rng.gen_range(2.0..8.0);
    let syl_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    // Harmonic amplitudes roll off as 1/k; keep every partial under 7.6 kHz
    // even at maximum vibrato excursion.
    let max_k = ((7600.0 / (f0 * (1.0 + vib_depth))).floor() as usize).clamp(1, 8);
    let amps: Vec<f64> = (1..=max_k)
        .map(|k| rng.gen_range(0.4..1.0) / k as f64)
        .collect();
    let phases: Vec<f64> = (0..max_k)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut phase = 0.0f64; // integrated fundamental phase
    let mut wave = vec![0.0f32; n];
    let mut peak = 0.0f64;
    let mut raw = vec![0.0f64; n];
    for (i, r) in raw.iter_mut().enumerate() {
        let t = i as f64 * dt;
        let f_inst = f0 * (1.0 + vib_depth * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin());
        phase += std::f64::consts::TAU * f_inst * dt;
        let mut v = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            v += a * ((k + 1) as f64 * phase + p).sin();
        }
        let syl = 0.5 + 0.5 * (std::f64::consts::TAU * syl_rate * t + syl_phase).sin();
        let env = 0.15 + 0.85 * syl * syl;
        *r = v * env;
        peak = peak.max(r.abs());
    }
    let norm = 0.5 / peak;
    for (w, &r) in wave.iter_mut().zip(&raw) {
        *w = (r * norm) as f32;
    }
    wave
}
