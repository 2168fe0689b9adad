use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::gaussian_vec;

pub const LATENT_DIM: usize = 128;
pub const SPEAKER_DIM: usize = 128;

/// Token ids padded to a fixed length, of which the first `true_length` are
/// valid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    true_length: usize,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, true_length: usize, vocab_size: usize) -> Result<Self> {
        if true_length == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if true_length > ids.len() {
            return Err(Error::Shape(format!(
                "true length {true_length} exceeds padded length {}",
                ids.len()
            )));
        }
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                position,
                vocab_size,
            });
        }
        Ok(Self {
            ids,
            true_length,
            vocab_size,
        })
    }

    /// Wraps `tokens` in `silence` on both sides and pads with `silence` up
    /// to `padded_length`.
    pub fn wrap(
        tokens: &[usize],
        silence: usize,
        padded_length: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        let true_length = tokens.len() + 2;
        if true_length > padded_length {
            return Err(Error::TooLarge {
                len: true_length,
                limit: padded_length,
            });
        }
        let mut ids = Vec::with_capacity(padded_length);
        ids.push(silence);
        ids.extend_from_slice(tokens);
        ids.resize(padded_length, silence);
        Self::new(ids, true_length, vocab_size)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn padded_length(&self) -> usize {
        self.ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.true_length).collect()
    }

    pub fn is_silence_wrapped(&self, silence: usize) -> bool {
        self.ids[0] == silence && self.ids[self.true_length - 1] == silence
    }
}

/// Latent draw and speaker index.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub latent: Vec<f64>,
    pub speaker: usize,
}

impl Conditioning {
    pub fn new(latent: Vec<f64>, speaker: usize) -> Result<Self> {
        if latent.len() != LATENT_DIM {
            return Err(Error::Shape(format!(
                "latent has {} entries, expected {LATENT_DIM}",
                latent.len()
            )));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(Self { latent, speaker })
    }

    pub fn sample(rng: &mut impl Rng, speaker: usize) -> Self {
        Self {
            latent: gaussian_vec(rng, LATENT_DIM),
            speaker,
        }
    }

    pub fn zero(speaker: usize) -> Self {
        Self {
            latent: vec![0.0; LATENT_DIM],
            speaker,
        }
    }
}
