//! Dataset manifests and on-disk sample artifacts.
//!
//! A dataset directory holds one WAV per mixture and per clean source, one
//! binary feature file per visual stream, and a `manifest.jsonl` with one
//! JSON record per line (paths relative to the manifest, the sample's seed,
//! requested SNRs, and the activity schedule in sample indices). Records
//! parse line by line, so large datasets stream without loading fully.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::wav;
use crate::mixsim::{ActivitySchedule, MixtureSample};
use crate::train::TrainSample;
use crate::visual::VisualStream;

/// One dataset entry; all paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub seed: u64,
    pub mixture: String,
    pub sources: Vec<String>,
    pub visuals: Vec<String>,
    pub snrs_db: Vec<f64>,
    /// `intervals[s]` lists `[start, end)` active sample ranges of speaker `s`.
    pub intervals: Vec<Vec<(usize, usize)>>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        text.push_str(
            &serde_json::to_string(rec)
                .map_err(|e| Error::Manifest(format!("record {}: {e}", rec.id)))?,
        );
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| {
            Error::Manifest(format!("{}: line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(records)
}

const VISUAL_MAGIC: &[u8; 4] = b"AVVF";
const VISUAL_VERSION: u32 = 1;

/// Writes a visual stream as flat binary: magic, version, then the header
/// (frame count, feature width, fps, identity seed) and the row-major
/// frames as little-endian f32.
pub fn write_visual(path: &Path, stream: &VisualStream) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + 4 * stream.frames.len());
    buf.extend_from_slice(VISUAL_MAGIC);
    buf.extend_from_slice(&VISUAL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(stream.t_video as u32).to_le_bytes());
    buf.extend_from_slice(&(stream.d_vis as u32).to_le_bytes());
    buf.extend_from_slice(&stream.fps.to_le_bytes());
    buf.extend_from_slice(&stream.identity_seed.to_le_bytes());
    for &v in &stream.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_visual(path: &Path) -> Result<VisualStream> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| Error::Manifest(format!("{}: {msg}", path.display()));
    if bytes.len() < 28 {
        return Err(fail("visual stream file shorter than its header"));
    }
    if &bytes[0..4] != VISUAL_MAGIC {
        return Err(fail("bad magic (not a visual stream file)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VISUAL_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let t_video = u32_at(8) as usize;
    let d_vis = u32_at(12) as usize;
    let fps = u32_at(16);
    let identity_seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let want = 28 + 4 * t_video * d_vis;
    if bytes.len() != want {
        return Err(fail(&format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - 28,
            want - 28
        )));
    }
    let frames = bytes[28..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(VisualStream {
        frames,
        t_video,
        d_vis,
        identity_seed,
        fps,
    })
}

/// Joint peak guard: one common gain keeps every waveform inside the 16-bit
/// range, preserving SNRs and the mixture-equals-sum identity.
fn peak_gain(sample: &TrainSample) -> f32 {
    let peak = std::iter::once(&sample.mix.mixture)
        .chain(&sample.mix.sources)
        .flat_map(|w| w.iter())
        .fold(0.0f32, |acc, &v| acc.max(v.abs()));
    if peak > 0.97 {
        0.97 / peak
    } else {
        1.0
    }
}

/// Writes one sample's WAVs and visual streams into `dir` and returns its
/// manifest record. File names embed `id`, so a directory holds many
/// samples beside one manifest.
pub fn save_sample(
    dir: &Path,
    id: usize,
    sample: &TrainSample,
    seed: u64,
) -> Result<ManifestRecord> {
    let gain = peak_gain(sample);
    let scaled = |w: &[f32]| w.iter().map(|&v| v * gain).collect::<Vec<f32>>();
    let sr = sample.mix.sample_rate;

    let mix_name = format!("sample_{id:05}_mix.wav");
    wav::write_wav(&dir.join(&mix_name), &scaled(&sample.mix.mixture), sr)?;

    let mut sources = Vec::new();
    let mut visuals = Vec::new();
    for (s, (src, vis)) in sample.mix.sources.iter().zip(&sample.visuals).enumerate() {
        let src_name = format!("sample_{id:05}_src{s}.wav");
        wav::write_wav(&dir.join(&src_name), &scaled(src), sr)?;
        sources.push(src_name);
        let vis_name = format!("sample_{id:05}_vis{s}.avf");
        write_visual(&dir.join(&vis_name), vis)?;
        visuals.push(vis_name);
    }

    Ok(ManifestRecord {
        id,
        seed,
        mixture: mix_name,
        sources,
        visuals,
        snrs_db: sample.mix.snrs_db.clone(),
        intervals: sample.mix.schedule.intervals.clone(),
    })
}

/// Loads one sample back; `base` is the directory holding the manifest.
pub fn load_sample(base: &Path, rec: &ManifestRecord) -> Result<TrainSample> {
    if rec.sources.len() != rec.visuals.len() || rec.sources.len() != rec.intervals.len() {
        return Err(Error::Manifest(format!(
            "record {}: {} sources, {} visuals, {} interval lists",
            rec.id,
            rec.sources.len(),
            rec.visuals.len(),
            rec.intervals.len()
        )));
    }
    let (mixture, sample_rate) = wav::read_wav(&base.join(&rec.mixture))?;
    let mut sources = Vec::new();
    for name in &rec.sources {
        let (wave, sr) = wav::read_wav(&base.join(name))?;
        if sr != sample_rate || wave.len() != mixture.len() {
            return Err(Error::Manifest(format!(
                "record {}: source {name} does not match the mixture's rate or length",
                rec.id
            )));
        }
        sources.push(wave);
    }
    let visuals = rec
        .visuals
        .iter()
        .map(|name| read_visual(&base.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let schedule = ActivitySchedule {
        intervals: rec.intervals.clone(),
        total_len: mixture.len(),
    };
    schedule.validate().map_err(|e| {
        Error::Manifest(format!("record {}: bad schedule: {e}", rec.id))
    })?;
    Ok(TrainSample {
        mix: MixtureSample {
            mixture,
            sources,
            schedule,
            snrs_db: rec.snrs_db.clone(),
            sample_rate,
        },
        visuals,
    })
}

/// Reads a manifest and loads every sample it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<TrainSample>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest_path)?
        .iter()
        .map(|rec| load_sample(base, rec))
        .collect()
}

/// Convenience for callers that hold a directory: its manifest path.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual::synth_visual;

    fn sample(seed: u64) -> TrainSample {
        TrainSample::synth_sparse(16_000, 2, 0.3, seed).unwrap()
    }

    #[test]
    fn manifest_lines_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_path(dir.path());
        let records: Vec<ManifestRecord> = (0..3)
            .map(|id| ManifestRecord {
                id,
                seed: 40 + id as u64,
                mixture: format!("sample_{id:05}_mix.wav"),
                sources: vec!["a.wav".into(), "b.wav".into()],
                visuals: vec!["a.avf".into(), "b.avf".into()],
                snrs_db: vec![-2.5],
                intervals: vec![vec![(0, 8000)], vec![(6000, 16000)]],
            })
            .collect();
        write_manifest(&path, &records).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn malformed_manifest_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_path(dir.path());
        std::fs::write(&path, "{\"id\": 0, broken\n").unwrap();
        match read_manifest(&path).unwrap_err() {
            Error::Manifest(msg) => assert!(msg.contains("line 1"), "{msg}"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn visual_streams_roundtrip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.avf");
        let source = crate::mixsim::synth_speech_like(9, 1.0);
        let stream = synth_visual(&[(0, source.len())], &source, 33);
        write_visual(&path, &stream).unwrap();
        assert_eq!(read_visual(&path).unwrap(), stream);
        // And the writer is deterministic.
        let first = std::fs::read(&path).unwrap();
        write_visual(&path, &stream).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn corrupt_visual_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.avf");
        std::fs::write(&path, b"AVVFxxxx").unwrap();
        assert!(matches!(read_visual(&path).unwrap_err(), Error::Manifest(_)));
        let source = crate::mixsim::synth_speech_like(9, 1.0);
        let stream = synth_visual(&[(0, source.len())], &source, 33);
        write_visual(&path, &stream).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_visual(&path).unwrap_err(), Error::Manifest(_)));
    }

    #[test]
    fn samples_survive_the_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(77);
        let rec = save_sample(dir.path(), 0, &s, 77).unwrap();
        let loaded = load_sample(dir.path(), &rec).unwrap();

        assert_eq!(loaded.mix.mixture.len(), s.mix.mixture.len());
        assert_eq!(loaded.mix.sources.len(), 2);
        assert_eq!(loaded.visuals, s.visuals); // feature files are lossless
        assert_eq!(loaded.mix.schedule, s.mix.schedule);
        assert_eq!(loaded.mix.snrs_db, s.mix.snrs_db);
        // Audio passes through 16-bit quantization: equal to within one
        // quantization step of the (possibly peak-normalized) original.
        let gain = peak_gain(&s);
        for (a, b) in s.mix.mixture.iter().zip(&loaded.mix.mixture) {
            assert!((a * gain - b).abs() <= 1.0 / 32768.0 + 1e-6);
        }
    }

    #[test]
    fn dataset_loading_follows_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<ManifestRecord> = (0..3)
            .map(|id| save_sample(dir.path(), id, &sample(200 + id as u64), 200 + id as u64).unwrap())
            .collect();
        let path = manifest_path(dir.path());
        write_manifest(&path, &records).unwrap();
        let set = load_dataset(&path).unwrap();
        assert_eq!(set.len(), 3);
        for s in &set {
            assert_eq!(s.n_speakers(), 2);
            assert_eq!(s.mix.mixture.len(), 16_000);
        }
    }
}
