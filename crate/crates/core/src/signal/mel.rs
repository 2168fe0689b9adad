//! Log-mel spectrogram pipeline with an analytic backward pass.
//!
//! The forward path is: optional jitter, μ-law expansion, STFT with a
//! periodic Hann window and end padding, magnitude, HTK-style triangular
//! mel filterbank, and `log(1 + 10000 * m)` compression. Defaults are 2048
//! sample frames, a 1024 sample hop, 80 bins between 80 Hz and 7600 Hz at
//! 24 kHz.
//!
//! The backward pass maps a cotangent on the log-mel grid back to the input
//! waveform through the same chain. Where a spectral magnitude is exactly
//! zero the sub-gradient of `|z|` is taken as zero.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::mulaw::{decode_derivative, decode_sample, MU};
use super::window::{draw_jitter, shift_signal};
use crate::error::{Error, Result};
use crate::grid::Grid;

const MEL_BREAK_HZ: f64 = 700.0;
const MEL_HIGH_Q: f64 = 1127.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MelParams {
    pub frame_length: usize,
    pub frame_step: usize,
    pub fft_length: usize,
    pub num_bins: usize,
    pub sample_rate: f64,
    pub lower_edge_hz: f64,
    pub upper_edge_hz: f64,
    pub pad_end: bool,
    /// Scale inside the log compression `log(1 + scale * m)`.
    pub log_scale: f64,
    pub mu: f64,
    /// Jitter bound used when a ground-truth spectrogram is jittered.
    pub max_jitter: usize,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            frame_length: 2048,
            frame_step: 1024,
            fft_length: 2048,
            num_bins: 80,
            sample_rate: 24_000.0,
            lower_edge_hz: 80.0,
            upper_edge_hz: 7600.0,
            pad_end: true,
            log_scale: 10_000.0,
            mu: MU,
            max_jitter: 60,
        }
    }
}

impl MelParams {
    /// Desk-scale front end for 4.8 kHz audio. The jitter bound keeps the
    /// same duration as 60 samples at 24 kHz. The milder log scale keeps the
    /// quiet bins of pure tones from dominating the loss.
    pub fn toy() -> Self {
        Self {
            frame_length: 256,
            frame_step: 128,
            fft_length: 256,
            num_bins: 20,
            sample_rate: 4800.0,
            lower_edge_hz: 40.0,
            upper_edge_hz: 2000.0,
            max_jitter: 12,
            log_scale: 10.0,
            ..Self::default()
        }
    }

    pub fn num_spectrogram_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if self.pad_end {
            num_samples.div_ceil(self.frame_step)
        } else if num_samples < self.frame_length {
            0
        } else {
            1 + (num_samples - self.frame_length) / self.frame_step
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frame_length == 0 || self.frame_step == 0 {
            return Err(Error::Config("frame length and step must be positive".into()));
        }
        if self.fft_length < self.frame_length {
            return Err(Error::Config(format!(
                "fft length {} is shorter than the frame length {}",
                self.fft_length, self.frame_length
            )));
        }
        let nyquist = self.sample_rate / 2.0;
        if !(0.0 <= self.lower_edge_hz
            && self.lower_edge_hz < self.upper_edge_hz
            && self.upper_edge_hz <= nyquist)
        {
            return Err(Error::Config(format!(
                "mel edges {}..{} Hz must satisfy 0 <= lower < upper <= {nyquist}",
                self.lower_edge_hz, self.upper_edge_hz
            )));
        }
        if self.num_bins == 0 {
            return Err(Error::Config("at least one mel bin is required".into()));
        }
        Ok(())
    }
}

/// A `T x F` grid of log-compressed mel magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Grid,
    pub params: MelParams,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn num_bins(&self) -> usize {
        self.values.cols()
    }
}

pub fn hertz_to_mel(hz: f64) -> f64 {
    MEL_HIGH_Q * (hz / MEL_BREAK_HZ).ln_1p()
}

pub fn mel_to_hertz(mel: f64) -> f64 {
    MEL_BREAK_HZ * (mel / MEL_HIGH_Q).exp_m1()
}

/// Hann window; `periodic` drops the final zero so overlapped frames sum flat.
pub fn hann_window(len: usize, periodic: bool) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let even = usize::from(len % 2 == 0);
    let denom = (len + usize::from(periodic) * even - 1) as f64;
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

/// Mel points spaced linearly between the edges: `num_bins + 2` values,
/// the interior ones being the filter centres.
fn band_edges_mel(num_bins: usize, lower_hz: f64, upper_hz: f64) -> Vec<f64> {
    let lo = hertz_to_mel(lower_hz);
    let hi = hertz_to_mel(upper_hz);
    let n = num_bins + 2;
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Triangular linear-to-mel weights, `num_spectrogram_bins x num_mel_bins`.
///
/// Triangles have unit peaks (no area normalisation) and the DC bin is
/// zeroed.
pub fn linear_to_mel_weight_matrix(
    num_mel_bins: usize,
    num_spectrogram_bins: usize,
    sample_rate: f64,
    lower_edge_hz: f64,
    upper_edge_hz: f64,
) -> Grid {
    let nyquist = sample_rate / 2.0;
    let edges = band_edges_mel(num_mel_bins, lower_edge_hz, upper_edge_hz);
    let mut out = Grid::zeros(num_spectrogram_bins, num_mel_bins);
    for k in 1..num_spectrogram_bins {
        let hz = nyquist * k as f64 / (num_spectrogram_bins - 1) as f64;
        let mel = hertz_to_mel(hz);
        for b in 0..num_mel_bins {
            let (lower, centre, upper) = (edges[b], edges[b + 1], edges[b + 2]);
            let rising = (mel - lower) / (centre - lower);
            let falling = (upper - mel) / (upper - centre);
            out[(k, b)] = rising.min(falling).max(0.0);
        }
    }
    out
}

/// Centre frequency of every mel filter, in Hz.
pub fn mel_band_centres(params: &MelParams) -> Vec<f64> {
    let edges = band_edges_mel(params.num_bins, params.lower_edge_hz, params.upper_edge_hz);
    edges[1..=params.num_bins]
        .iter()
        .map(|&m| mel_to_hertz(m))
        .collect()
}

/// Saved forward state for [`MelFrontend::backward`].
#[derive(Clone, Debug)]
pub struct MelTrace {
    input_len: usize,
    shift: isize,
    invert_mu_law: bool,
    /// Input after jitter, before μ-law expansion.
    shifted: Vec<f64>,
    /// One-sided spectrum of every frame.
    spectra: Vec<Vec<Complex64>>,
    /// Mel magnitudes before log compression.
    mel_linear: Grid,
}

impl MelTrace {
    pub fn mel_linear(&self) -> &Grid {
        &self.mel_linear
    }
}

/// Precomputed window, filterbank and FFT plans for one set of parameters.
#[derive(Clone)]
pub struct MelFrontend {
    params: MelParams,
    window: Vec<f64>,
    mel_matrix: Grid,
    forward_fft: Arc<dyn Fft<f64>>,
    inverse_fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend")
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl MelFrontend {
    pub fn new(params: MelParams) -> Result<Self> {
        params.validate()?;
        let mut planner = FftPlanner::new();
        let forward_fft = planner.plan_fft_forward(params.fft_length);
        let inverse_fft = planner.plan_fft_inverse(params.fft_length);
        let mel_matrix = linear_to_mel_weight_matrix(
            params.num_bins,
            params.num_spectrogram_bins(),
            params.sample_rate,
            params.lower_edge_hz,
            params.upper_edge_hz,
        );
        Ok(Self {
            window: hann_window(params.frame_length, true),
            mel_matrix,
            forward_fft,
            inverse_fft,
            params,
        })
    }

    pub fn params(&self) -> &MelParams {
        &self.params
    }

    pub fn mel_matrix(&self) -> &Grid {
        &self.mel_matrix
    }

    /// Log-mel spectrogram of `samples`, delayed by `shift` samples first.
    pub fn forward(
        &self,
        samples: &[f64],
        invert_mu_law: bool,
        shift: isize,
    ) -> Result<(MelSpectrogram, MelTrace)> {
        let p = &self.params;
        if samples.len() < p.frame_step {
            return Err(Error::SignalTooShort {
                len: samples.len(),
                hop: p.frame_step,
            });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        let shifted = if shift == 0 {
            samples.to_vec()
        } else {
            shift_signal(samples, shift)
        };
        let linear: Vec<f64> = if invert_mu_law {
            shifted.iter().map(|&t| decode_sample(t, p.mu)).collect()
        } else {
            shifted.clone()
        };

        let frames = p.num_frames(samples.len());
        let bins = p.num_spectrogram_bins();
        let mut spectra = Vec::with_capacity(frames);
        let mut mel_linear = Grid::zeros(frames, p.num_bins);
        let mut values = Grid::zeros(frames, p.num_bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); p.fft_length];
        let mut mags = vec![0.0; bins];
        for t in 0..frames {
            let start = t * p.frame_step;
            for (n, slot) in buf.iter_mut().enumerate() {
                let x = if n < p.frame_length {
                    linear.get(start + n).copied().unwrap_or(0.0) * self.window[n]
                } else {
                    0.0
                };
                *slot = Complex64::new(x, 0.0);
            }
            self.forward_fft.process(&mut buf);
            let one_sided = buf[..bins].to_vec();
            for (m, z) in mags.iter_mut().zip(&one_sided) {
                *m = z.norm();
            }
            let mel_row = mel_linear.row_mut(t);
            for (k, &mag) in mags.iter().enumerate() {
                if mag == 0.0 {
                    continue;
                }
                for (acc, &w) in mel_row.iter_mut().zip(self.mel_matrix.row(k)) {
                    *acc += mag * w;
                }
            }
            for (v, &m) in values.row_mut(t).iter_mut().zip(mel_row.iter()) {
                *v = (p.log_scale * m).ln_1p();
            }
            spectra.push(one_sided);
        }
        let trace = MelTrace {
            input_len: samples.len(),
            shift,
            invert_mu_law,
            shifted,
            spectra,
            mel_linear,
        };
        Ok((
            MelSpectrogram {
                values,
                params: p.clone(),
            },
            trace,
        ))
    }

    pub fn compute(&self, samples: &[f64], invert_mu_law: bool) -> Result<MelSpectrogram> {
        Ok(self.forward(samples, invert_mu_law, 0)?.0)
    }

    /// Mel magnitudes before log compression.
    pub fn linear_mel(&self, samples: &[f64], invert_mu_law: bool) -> Result<Grid> {
        Ok(self.forward(samples, invert_mu_law, 0)?.1.mel_linear)
    }

    /// Gradient with respect to the input waveform given a cotangent on
    /// the log-mel grid.
    pub fn backward(&self, trace: &MelTrace, grad: &Grid) -> Vec<f64> {
        let p = &self.params;
        let frames = trace.spectra.len();
        debug_assert_eq!(grad.shape(), (frames, p.num_bins));
        let len = trace.input_len;
        let mut grad_linear = vec![0.0; len];
        let bins = p.num_spectrogram_bins();
        let mut grad_mel = vec![0.0; p.num_bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); p.fft_length];
        for t in 0..frames {
            for ((gm, &g), &m) in grad_mel
                .iter_mut()
                .zip(grad.row(t))
                .zip(trace.mel_linear.row(t))
            {
                *gm = g * p.log_scale / (1.0 + p.log_scale * m);
            }
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (k, z) in trace.spectra[t].iter().enumerate().take(bins) {
                let mag = z.norm();
                if mag == 0.0 {
                    continue;
                }
                let g_mag: f64 = self
                    .mel_matrix
                    .row(k)
                    .iter()
                    .zip(&grad_mel)
                    .map(|(w, g)| w * g)
                    .sum();
                buf[k] = z * (g_mag / mag);
            }
            // d/dx[n] of sum_k Re(conj(G_k) X_k) = Re(sum_k G_k e^{+i 2 pi k n / N})
            self.inverse_fft.process(&mut buf);
            let start = t * p.frame_step;
            for n in 0..p.frame_length {
                let pos = start + n;
                if pos >= len {
                    break;
                }
                grad_linear[pos] += self.window[n] * buf[n].re;
            }
        }
        let grad_shifted: Vec<f64> = if trace.invert_mu_law {
            grad_linear
                .iter()
                .zip(&trace.shifted)
                .map(|(g, &t)| g * decode_derivative(t, p.mu))
                .collect()
        } else {
            grad_linear
        };
        if trace.shift == 0 {
            return grad_shifted;
        }
        // shifted[i] = input[i - shift]
        shift_signal(&grad_shifted, -trace.shift)
    }
}

/// One-shot log-mel spectrogram. When `jitter` is given, the waveform is
/// shifted by a uniform draw in `[-max_jitter, max_jitter]` first.
pub fn mel_spectrogram<R: Rng>(
    samples: &[f64],
    invert_mu_law: bool,
    jitter: Option<&mut R>,
    params: &MelParams,
) -> Result<MelSpectrogram> {
    let frontend = MelFrontend::new(params.clone())?;
    let shift = match jitter {
        Some(rng) => draw_jitter(params.max_jitter, rng),
        None => 0,
    };
    Ok(frontend.forward(samples, invert_mu_law, shift)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::mulaw::mu_law_encode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, amp: f64, n: usize, sr: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
            .collect()
    }

    #[test]
    fn two_seconds_give_47_by_80() {
        let frontend = MelFrontend::new(MelParams::default()).unwrap();
        let w = mu_law_encode(&tone(440.0, 0.3, 48_000, 24_000.0), MU).unwrap();
        let spec = frontend.compute(&w, true).unwrap();
        assert_eq!(spec.values.shape(), (47, 80));
        assert!(spec.values.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn silence_maps_to_zero() {
        let frontend = MelFrontend::new(MelParams::default()).unwrap();
        let spec = frontend.compute(&vec![0.0; 5000], true).unwrap();
        assert_eq!(spec.values.shape(), (5, 80));
        assert!(spec.values.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shorter_than_one_hop_is_an_error() {
        let frontend = MelFrontend::new(MelParams::default()).unwrap();
        assert!(matches!(
            frontend.compute(&[0.1; 1000], true),
            Err(Error::SignalTooShort { len: 1000, hop: 1024 })
        ));
    }

    #[test]
    fn periodic_hann_matches_closed_form() {
        let w = hann_window(8, true);
        let expected = [0.0, 0.146_446_609_4, 0.5, 0.853_553_390_6, 1.0, 0.853_553_390_6, 0.5, 0.146_446_609_4];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
        let sym = hann_window(5, false);
        assert!((sym[4]).abs() < 1e-15 && (sym[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn filterbank_triangles_peak_at_one() {
        let m = linear_to_mel_weight_matrix(80, 1025, 24_000.0, 80.0, 7600.0);
        assert_eq!(m.shape(), (1025, 80));
        assert!(m.row(0).iter().all(|&w| w == 0.0));
        for b in 0..80 {
            let peak = (0..1025).map(|k| m[(k, b)]).fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0);
        }
        // nothing above the upper edge
        let above = (7600.0 / 12_000.0 * 1024.0_f64).ceil() as usize + 1;
        assert!((above..1025).all(|k| m.row(k).iter().all(|&w| w == 0.0)));
    }

    #[test]
    fn doubling_amplitude_raises_every_nonzero_magnitude() {
        let frontend = MelFrontend::new(MelParams::default()).unwrap();
        let quiet = frontend
            .linear_mel(&tone(1000.0, 0.2, 12_000, 24_000.0), false)
            .unwrap();
        let loud = frontend
            .linear_mel(&tone(1000.0, 0.4, 12_000, 24_000.0), false)
            .unwrap();
        let mut compared = 0;
        for (q, l) in quiet.as_slice().iter().zip(loud.as_slice()) {
            if *q > 0.0 {
                assert!(l > q);
                compared += 1;
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn tone_lands_in_the_bin_containing_it() {
        let params = MelParams::toy();
        let frontend = MelFrontend::new(params.clone()).unwrap();
        let spec = frontend
            .compute(&tone(400.0, 0.5, 4800, params.sample_rate), false)
            .unwrap();
        // oracle: the filter with the largest response at 400 Hz
        let edges = band_edges_mel(params.num_bins, params.lower_edge_hz, params.upper_edge_hz);
        let mel = hertz_to_mel(400.0);
        let expected = (0..params.num_bins)
            .max_by(|&a, &b| {
                let resp = |i: usize| {
                    ((mel - edges[i]) / (edges[i + 1] - edges[i]))
                        .min((edges[i + 2] - mel) / (edges[i + 2] - edges[i + 1]))
                };
                resp(a).total_cmp(&resp(b))
            })
            .unwrap();
        for t in 2..spec.num_frames() - 2 {
            let row = spec.values.row(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let params = MelParams {
            frame_length: 64,
            frame_step: 32,
            fft_length: 64,
            num_bins: 8,
            sample_rate: 4800.0,
            lower_edge_hz: 100.0,
            upper_edge_hz: 2000.0,
            max_jitter: 5,
            ..MelParams::default()
        };
        let frontend = MelFrontend::new(params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..150).map(|_| rng.random_range(-0.9..0.9)).collect();
        for shift in [0isize, 3, -4] {
            let (spec, trace) = frontend.forward(&x, true, shift).unwrap();
            let cot = Grid::from_fn(spec.values.rows(), spec.values.cols(), |_, _| {
                rng.random_range(-1.0..1.0)
            });
            let analytic = frontend.backward(&trace, &cot);
            let h = 1e-6;
            for i in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fp = frontend.forward(&xp, true, shift).unwrap().0.values.dot(&cot);
                let fm = frontend.forward(&xm, true, shift).unwrap().0.values.dot(&cot);
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(1.0);
                assert!(err < 1e-5, "shift {shift} coord {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }
}
