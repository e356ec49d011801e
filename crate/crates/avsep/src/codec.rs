//! Learned analysis/synthesis pair between waveforms and latent frame
//! sequences: strided convolution with rectification forward, transposed
//! convolution with overlap-add back, trimmed or zero-padded to the source
//! length. Kernels are owned by the model; this module only applies them
//! and keeps the length bookkeeping honest.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Encoded representation of one waveform plus the geometry needed to
/// invert it.
#[derive(Debug, Clone)]
pub struct LatentFrames<E: Elem> {
    /// `[n_filters, t_frames]`, non-negative.
    pub frames: Tensor<E>,
    pub frame_stride: usize,
    pub kernel_len: usize,
    pub source_len: usize,
}

/// Frames produced by a strided sliding window: `floor((len − kernel)/stride) + 1`.
pub fn frame_count(source_len: usize, kernel_len: usize, stride: usize) -> Result<usize> {
    if source_len < kernel_len {
        return Err(Error::InputTooShort {
            needed: kernel_len,
            got: source_len,
        });
    }
    Ok((source_len - kernel_len) / stride + 1)
}

/// Analysis: strided convolution with `kernel` (`[n_filters, 1, kernel_len]`)
/// followed by rectification.
pub fn encode<E: Elem>(
    wave: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
) -> Result<LatentFrames<E>> {
    if wave.ndim() != 1 {
        return Err(Error::Dimension {
            op: "encode",
            msg: format!("expected 1-D waveform, got shape {:?}", wave.shape()),
        });
    }
    let source_len = wave.shape()[0];
    let kernel_len = kernel.shape()[2];
    frame_count(source_len, kernel_len, stride)?; // surfaces too-short input
    let x = wave.reshape(&[1, source_len])?;
    let frames = x.conv1d(kernel, stride)?.relu();
    Ok(LatentFrames {
        frames,
        frame_stride: stride,
        kernel_len,
        source_len,
    })
}

/// Synthesis: transposed convolution with `kernel` (`[n_filters, kernel_len]`),
/// overlap-added and then trimmed or zero-padded to `source_len`.
pub fn decode<E: Elem>(latent: &LatentFrames<E>, kernel: &Tensor<E>) -> Result<Tensor<E>> {
    let (n_filters, t_frames) = (latent.frames.shape()[0], latent.frames.shape()[1]);
    if kernel.shape() != [n_filters, latent.kernel_len] {
        return Err(Error::Contract(format!(
            "decode kernel shape {:?} inconsistent with latent geometry \
             ({n_filters} filters, kernel {})",
            kernel.shape(),
            latent.kernel_len
        )));
    }
    let expected = frame_count(latent.source_len, latent.kernel_len, latent.frame_stride)?;
    if t_frames != expected {
        return Err(Error::Contract(format!(
            "latent has {t_frames} frames but geometry implies {expected}"
        )));
    }
    let raw = latent.frames.conv_transpose1d(kernel, latent.frame_stride)?;
    let raw_len = raw.shape()[0];
    if raw_len >= latent.source_len {
        raw.narrow(0, 0, latent.source_len)
    } else {
        let pad = Tensor::zeros(&[latent.source_len - raw_len]);
        Tensor::concat(&[raw, pad], 0)
    }
}
