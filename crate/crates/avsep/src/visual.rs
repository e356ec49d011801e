//! Synthetic per-speaker visual streams: the stand-in for face recordings.
//!
//! A real system would run face tracking and a lip frontend; here each
//! 40 ms video frame carries just what the extraction mechanism needs from
//! such a frontend: who the speaker is (a seeded identity code) and whether
//! they are talking (a smoothed log-energy of their clean source), plus a
//! little seeded noise so the features are not suspiciously clean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Video frame rate.
pub const FPS: u32 = 25;
/// Audio samples covered by one video frame (16 kHz / 25 fps).
pub const SAMPLES_PER_FRAME: usize = 640;

/// Feature layout per video frame.
pub const IDENTITY_DIMS: usize = 16;
/// Index of the activity (log-energy) channel.
pub const ENERGY_CHANNEL: usize = IDENTITY_DIMS;
pub const NOISE_DIMS: usize = 7;
/// Total feature dimension: identity + energy + noise.
pub const VIS_DIM: usize = IDENTITY_DIMS + 1 + NOISE_DIMS;

const NOISE_AMP: f32 = 0.05;
const ENERGY_FLOOR: f64 = 1e-6;

/// A 25 fps feature-frame sequence for one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualStream {
    /// Row-major `[t_video, d_vis]`.
    pub frames: Vec<f32>,
    pub t_video: usize,
    pub d_vis: usize,
    pub identity_seed: u64,
    pub fps: u32,
}

impl VisualStream {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.d_vis..(t + 1) * self.d_vis]
    }

    /// The activity channel across all frames.
    pub fn energy_track(&self) -> Vec<f32> {
        (0..self.t_video)
            .map(|t| self.frame(t)[ENERGY_CHANNEL])
            .collect()
    }
}

/// Log-energy of one frame's samples mapped to roughly [0, 1]: silence
/// lands exactly at the floor value 0.
fn energy_feature(frame: &[f32]) -> f64 {
    let p = frame
        .iter()
        .fold(0.0f64, |acc, &v| acc + v as f64 * v as f64)
        / frame.len().max(1) as f64;
    ((p + ENERGY_FLOOR).log10() - ENERGY_FLOOR.log10()) / 6.0
}

/// Builds the visual stream for one speaker from their activity intervals
/// and clean source track.
///
/// Only samples inside the given `[start, end)` intervals contribute to the
/// energy channel, so frames outside the speaker's turns carry exactly the
/// baseline (silence) value even if the waveform is noisy there. Frame count
/// is `ceil(len / 640)`; the trailing partial frame, if any, is measured over
/// its real samples.
pub fn synth_visual(
    intervals: &[(usize, usize)],
    source: &[f32],
    identity_seed: u64,
) -> VisualStream {
    let t_video = source.len().div_ceil(SAMPLES_PER_FRAME);
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
    let identity: Vec<f32> = (0..IDENTITY_DIMS)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();

    let mut gate = vec![false; source.len()];
    for &(start, end) in intervals {
        for g in &mut gate[start.min(source.len())..end.min(source.len())] {
            *g = true;
        }
    }
    let gated: Vec<f32> = source
        .iter()
        .zip(&gate)
        .map(|(&v, &active)| if active { v } else { 0.0 })
        .collect();

    // Raw per-frame log-energy, then a 3-tap moving average: a crude stand-in
    // for the temporal smearing of real articulator motion.
    let raw: Vec<f64> = (0..t_video)
        .map(|t| {
            let start = t * SAMPLES_PER_FRAME;
            let end = ((t + 1) * SAMPLES_PER_FRAME).min(source.len());
            energy_feature(&gated[start..end])
        })
        .collect();
    let smoothed: Vec<f32> = (0..t_video)
        .map(|t| {
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(t_video - 1);
            let sum: f64 = raw[lo..=hi].iter().sum();
            (sum / (hi - lo + 1) as f64) as f32
        })
        .collect();

    let mut frames = Vec::with_capacity(t_video * VIS_DIM);
    for t in 0..t_video {
        frames.extend_from_slice(&identity);
        frames.push(smoothed[t]);
        for _ in 0..NOISE_DIMS {
            frames.push(NOISE_AMP * rng.gen_range(-1.0f32..1.0));
        }
    }
    VisualStream {
        frames,
        t_video,
        d_vis: VIS_DIM,
        identity_seed,
        fps: FPS,
    }
}
