//! Audio preprocessing: μ-law companding, jitter, training windows, random
//! window discriminator sub-windows and the log-mel spectrogram.

pub mod io;
pub mod mel;
pub mod mulaw;
pub mod window;

pub use mel::{
    hertz_to_mel, mel_band_centres, mel_spectrogram, mel_to_hertz, MelFrontend, MelParams,
    MelSpectrogram, MelTrace,
};
pub use mulaw::{mu_law_decode, mu_law_encode, MU};
pub use window::{
    apply_jitter, apply_jitter_batch, extract_window, sample_rwd_windows, WindowSpec,
    MAX_JITTER, RWD_SIZES, TRAINING_WINDOW,
};

use crate::error::Result;

/// Default audio rate.
pub const SAMPLE_RATE: u32 = 24_000;

/// Mono audio. Samples are in the μ-law domain unless `linear` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub linear: bool,
}

impl Waveform {
    /// A linear-amplitude waveform.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            linear: true,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Converts to the μ-law domain (no-op if already there).
    pub fn to_mu_law(&self, mu: f64) -> Result<Self> {
        if !self.linear {
            return Ok(self.clone());
        }
        Ok(Self {
            samples: mu_law_encode(&self.samples, mu)?,
            sample_rate: self.sample_rate,
            linear: false,
        })
    }

    pub fn to_linear(&self, mu: f64) -> Result<Self> {
        if self.linear {
            return Ok(self.clone());
        }
        Ok(Self {
            samples: mu_law_decode(&self.samples, mu)?,
            sample_rate: self.sample_rate,
            linear: true,
        })
    }
}
