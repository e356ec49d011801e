//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono audio.
//!
//! Samples on disk are little-endian `i16`; in memory they are `f32` in
//! `[-1, 1)` using the fixed scale 32768. Both directions are exact for
//! values of the form `k / 32768`, so write-then-read is bit-faithful for
//! anything that itself came from a wav file.

use std::convert::TryInto;
use std::path::Path;

/// Sample rate used throughout the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

const PCM_SCALE: f32 = 32_768.0;

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("missing '{0}' chunk")]
    MissingChunk(&'static str),
    #[error("unsupported wav encoding: format={format}, channels={channels}, bits={bits}")]
    Unsupported { format: u16, channels: u16, bits: u16 },
    #[error("truncated chunk: declared {declared} bytes, {available} available")]
    Truncated { declared: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes mono 16-bit PCM. Samples are scaled by 32768, rounded to nearest,
/// and clipped to the `i16` range.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), WavError> {
    let data_len = samples.len() * 2;
    let mut bytes = Vec::with_capacity(44 + data_len);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s * PCM_SCALE).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads mono 16-bit PCM, returning samples and the declared sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32), WavError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or(WavError::Truncated {
                declared: size,
                available: bytes.len().saturating_sub(start),
            })?;
        let body = &bytes[start..end];
        match &id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(WavError::MissingChunk("fmt "));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, and friends
        }
        // RIFF chunks are word-aligned; odd sizes carry a pad byte.
        pos = end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    if format != 1 || channels != 1 || bits != 16 {
        return Err(WavError::Unsupported {
            format,
            channels,
            bits,
        });
    }
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    let samples = data
        .chunks_exact(2)
        .map(|pair| i16::from_le_bytes([pair[0], pair[1]]) as f32 / PCM_SCALE)
        .collect();
    Ok((samples, rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact_for_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let samples: Vec<f32> = [-32768i16, -1, 0, 1, 12345, 32767]
            .iter()
            .map(|&k| k as f32 / 32768.0)
            .collect();
        write_wav(&path, &samples, SAMPLE_RATE).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, SAMPLE_RATE);
        assert_eq!(back, samples);
    }

    #[test]
    fn header_layout_matches_reference_bytes() {
        // Two-sample file checked against a hand-assembled header: 36 + 4
        // riff size, PCM/mono/16k/16-bit fmt fields, 4-byte data chunk.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.wav");
        write_wav(&path, &[0.0, 1.0 / 32768.0], 16_000).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let expected: Vec<u8> = [
            b"RIFF".to_vec(),
            40u32.to_le_bytes().to_vec(),
            b"WAVE".to_vec(),
            b"fmt ".to_vec(),
            16u32.to_le_bytes().to_vec(),
            1u16.to_le_bytes().to_vec(),
            1u16.to_le_bytes().to_vec(),
            16_000u32.to_le_bytes().to_vec(),
            32_000u32.to_le_bytes().to_vec(),
            2u16.to_le_bytes().to_vec(),
            16u16.to_le_bytes().to_vec(),
            b"data".to_vec(),
            4u32.to_le_bytes().to_vec(),
            vec![0, 0, 1, 0],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn out_of_range_samples_clip_to_i16_limits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        write_wav(&path, &[1.5, -1.5], SAMPLE_RATE).unwrap();
        let (back, _) = read_wav(&path).unwrap();
        assert_eq!(back, vec![32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn rejects_non_wave_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wav");
        std::fs::write(&path, b"definitely not audio").unwrap();
        assert!(matches!(read_wav(&path), Err(WavError::NotWave)));
    }

    #[test]
    fn rejects_stereo_fmt() {
        // Patch the channel count in an otherwise valid file.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        write_wav(&path, &[0.0; 4], SAMPLE_RATE).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(WavError::Unsupported { channels: 2, .. })
        ));
    }

    #[test]
    fn rejects_truncated_data_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.wav");
        write_wav(&path, &[0.0; 8], SAMPLE_RATE).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(read_wav(&path), Err(WavError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_preserves_arbitrary_i16_payloads(raw in proptest::collection::vec(any::<i16>(), 0..256)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.wav");
            let samples: Vec<f32> = raw.iter().map(|&k| k as f32 / 32768.0).collect();
            write_wav(&path, &samples, SAMPLE_RATE).unwrap();
            let (back, _) = read_wav(&path).unwrap();
            prop_assert_eq!(back, samples);
        }
    }
}
