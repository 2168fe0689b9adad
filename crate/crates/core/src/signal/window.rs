//! Training-window extraction, random window discriminator sub-windows and
//! waveform jitter.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Default jitter bound, in samples at 24 kHz.
pub const MAX_JITTER: usize = 60;

/// Default training window: 2 s at 24 kHz.
pub const TRAINING_WINDOW: usize = 48_000;

/// Sub-window sizes of the five random window discriminators, in samples at 24 kHz.
pub const RWD_SIZES: [usize; 5] = [240, 480, 960, 1920, 3600];

/// A contiguous span `[offset, offset + length)` of a waveform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub offset: usize,
    pub length: usize,
}

impl WindowSpec {
    pub fn new(offset: usize, length: usize) -> Self {
        Self { offset, length }
    }

    pub fn end(&self) -> usize {
        self.offset + self.length
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.end()
    }

    /// Uniform offset over every position at which a window of `length`
    /// fits a clip of `source_len` samples after post-padding.
    pub fn random(source_len: usize, length: usize, rng: &mut impl Rng) -> Self {
        let padded = source_len.max(length);
        let offset = rng.random_range(0..=padded - length);
        Self { offset, length }
    }
}

/// Appends silence so the clip is at least `min_len` samples long.
pub fn post_pad(samples: &[f64], min_len: usize) -> Vec<f64> {
    let mut out = samples.to_vec();
    if out.len() < min_len {
        out.resize(min_len, 0.0);
    }
    out
}

/// Returns samples `[offset, offset + length)` of `samples`, post-padded
/// with silence to the window length when the clip is shorter than it.
pub fn extract_window(samples: &[f64], spec: WindowSpec) -> Result<Vec<f64>> {
    let padded_len = samples.len().max(spec.length);
    if spec.end() > padded_len {
        return Err(Error::WindowOutOfBounds {
            offset: spec.offset,
            end: spec.end(),
            len: padded_len,
        });
    }
    let mut out = vec![0.0; spec.length];
    let available = samples.len().saturating_sub(spec.offset).min(spec.length);
    if available > 0 {
        out[..available].copy_from_slice(&samples[spec.offset..spec.offset + available]);
    }
    Ok(out)
}

/// Draws one sub-window per requested size with its start uniform in
/// `[0, len - size]`.
pub fn sample_rwd_windows(
    window_len: usize,
    sizes: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<WindowSpec>> {
    sizes
        .iter()
        .map(|&size| {
            if size == 0 || size > window_len {
                return Err(Error::WindowOutOfBounds {
                    offset: 0,
                    end: size,
                    len: window_len,
                });
            }
            Ok(WindowSpec::new(rng.random_range(0..=window_len - size), size))
        })
        .collect()
}

/// Delays the signal by `shift` samples (advances it when negative),
/// filling vacated positions with zeros. Length is preserved.
pub fn shift_signal(samples: &[f64], shift: isize) -> Vec<f64> {
    let n = samples.len() as isize;
    (0..n)
        .map(|i| {
            let src = i - shift;
            if (0..n).contains(&src) {
                samples[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Draws a shift uniformly in `[-max_jitter, max_jitter]`.
///
/// Equivalent to zero-padding by `max_jitter` on both sides and cropping
/// the original length at a uniform start in `[0, 2 * max_jitter]`.
pub fn draw_jitter(max_jitter: usize, rng: &mut impl Rng) -> isize {
    let start = rng.random_range(0..=2 * max_jitter);
    max_jitter as isize - start as isize
}

pub fn apply_jitter(samples: &[f64], max_jitter: usize, rng: &mut impl Rng) -> Vec<f64> {
    shift_signal(samples, draw_jitter(max_jitter, rng))
}

/// Jitters every batch item from its own sub-stream of `seed`.
pub fn apply_jitter_batch(batch: &[Vec<f64>], max_jitter: usize, seed: u64) -> Vec<Vec<f64>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng: ChaCha8Rng = substream(seed, i as u64);
            apply_jitter(item, max_jitter, &mut rng)
        })
        .collect()
}
