//! Synthetic tone language with known per-token durations.

use rand::Rng;

use crate::aligner::TokenSequence;
use crate::error::{Error, Result};
use crate::signal::{mu_law_encode, MelParams, MU};

/// Token id of the silence symbol.
pub const SILENCE: usize = 0;
pub const SILENCE_SYMBOL: char = '_';
/// Symbol of tone `k` is `TONE_SYMBOLS[k]`; its token id is `k + 1`.
pub const TONE_SYMBOLS: [char; 8] = ['a', 'e', 'i', 'o', 'k', 'l', 'j', '.'];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub num_tones: usize,
    pub sample_rate: u32,
    pub aligner_rate: u32,
    pub base_frequency: f64,
    pub frequency_step: f64,
    pub base_duration: f64,
    pub duration_step: f64,
    pub silence_duration: f64,
    pub amplitude: f64,
    /// Per-utterance speaking-rate spread; 0 disables it.
    pub rate_jitter: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub padded_length: usize,
    pub mel: MelParams,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            num_tones: 8,
            sample_rate: 4800,
            aligner_rate: 40,
            base_frequency: 200.0,
            frequency_step: 100.0,
            base_duration: 0.10,
            duration_step: 0.02,
            silence_duration: 0.05,
            amplitude: 0.5,
            rate_jitter: 0.0,
            min_tokens: 3,
            max_tokens: 8,
            padded_length: 16,
            mel: MelParams::toy(),
        }
    }
}

impl ToyTask {
    pub fn stochastic() -> Self {
        Self {
            rate_jitter: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tones == 0 || self.num_tones > TONE_SYMBOLS.len() {
            return Err(Error::Config(format!(
                "between 1 and {} tones are supported, got {}",
                TONE_SYMBOLS.len(),
                self.num_tones
            )));
        }
        if self.aligner_rate == 0 || self.sample_rate % self.aligner_rate != 0 {
            return Err(Error::Config(format!(
                "sample rate {} is not a multiple of aligner rate {}",
                self.sample_rate, self.aligner_rate
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let top = self.tone_frequency(self.num_tones - 1);
        if top >= nyquist {
            return Err(Error::Config(format!(
                "tone at {top} Hz is above the {nyquist} Hz Nyquist limit"
            )));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("token count range is empty".into()));
        }
        if self.max_tokens + 2 > self.padded_length {
            return Err(Error::Config(format!(
                "{} tokens plus silences do not fit {} positions",
                self.max_tokens, self.padded_length
            )));
        }
        if !(0.0..1.0).contains(&self.rate_jitter) {
            return Err(Error::Config(format!("rate jitter {} not in [0, 1)", self.rate_jitter)));
        }
        if self.mel.sample_rate != self.sample_rate as f64 {
            return Err(Error::Config("mel sample rate differs from the task rate".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.num_tones + 1
    }

    pub fn samples_per_step(&self) -> usize {
        (self.sample_rate / self.aligner_rate) as usize
    }

    pub fn tone_frequency(&self, tone: usize) -> f64 {
        self.base_frequency + self.frequency_step * tone as f64
    }

    pub fn token_seconds(&self, id: usize) -> f64 {
        if id == SILENCE {
            self.silence_duration
        } else {
            self.base_duration + self.duration_step * (id - 1) as f64
        }
    }

    /// Duration of token `id` in aligner steps at speaking rate `rate`.
    pub fn token_steps(&self, id: usize, rate: f64) -> usize {
        ((self.token_seconds(id) * rate * self.aligner_rate as f64).round() as usize).max(1)
    }

    /// Random tone ids, without the silence wrapper.
    /// Mean nominal tone duration in aligner steps.
    pub fn mean_tone_steps(&self) -> f64 {
        let total: usize = (1..=self.num_tones).map(|id| self.token_steps(id, 1.0)).sum();
        total as f64 / self.num_tones as f64
    }

    pub fn random_tones(&self, rng: &mut impl Rng) -> Vec<usize> {
        let n = rng.random_range(self.min_tokens..=self.max_tokens);
        (0..n).map(|_| rng.random_range(1..=self.num_tones)).collect()
    }

    pub fn wrap(&self, tones: &[usize]) -> Result<TokenSequence> {
        TokenSequence::wrap(tones, SILENCE, self.padded_length, self.vocab_size())
    }
}

/// Symbol replacements applied before lookup; `None` deletes the symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct SubstitutionTable {
    pub entries: Vec<(char, Option<char>)>,
}

impl Default for SubstitutionTable {
    fn default() -> Self {
        Self {
            entries: vec![
                ('x', Some('k')),
                ('ç', Some('k')),
                ('ɬ', Some('l')),
                ('ʲ', Some('j')),
                (';', Some('.')),
                ('—', Some('.')),
                ('¡', None),
                ('r', None),
                ('~', None),
                ('"', None),
            ],
        }
    }
}

impl SubstitutionTable {
    pub fn apply(&self, raw: &str) -> String {
        raw.chars()
            .filter_map(|c| match self.entries.iter().find(|(from, _)| *from == c) {
                Some((_, to)) => *to,
                None => Some(c),
            })
            .collect()
    }
}

pub fn symbol_id(symbol: char) -> Option<usize> {
    if symbol == SILENCE_SYMBOL {
        return Some(SILENCE);
    }
    TONE_SYMBOLS.iter().position(|&s| s == symbol).map(|k| k + 1)
}

pub fn id_symbol(id: usize) -> char {
    if id == SILENCE {
        SILENCE_SYMBOL
    } else {
        TONE_SYMBOLS[id - 1]
    }
}

/// Substitutes, maps symbols to ids (whitespace is skipped) and wraps the
/// result in silence.
pub fn preprocess_tokens(raw: &str, table: &SubstitutionTable, task: &ToyTask) -> Result<TokenSequence> {
    let mut ids = Vec::new();
    for c in table.apply(raw).chars().filter(|c| !c.is_whitespace()) {
        match symbol_id(c) {
            Some(id) if id <= task.num_tones => ids.push(id),
            _ => return Err(Error::UnknownSymbol(c.to_string())),
        }
    }
    task.wrap(&ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Linear-amplitude audio.
    pub waveform: Vec<f64>,
    /// Aligner steps per valid token, silences included.
    pub durations: Vec<usize>,
    pub total_steps: usize,
    pub rate: f64,
}

impl GroundTruth {
    pub fn mu_law(&self) -> Vec<f64> {
        mu_law_encode(&self.waveform, MU).expect("amplitudes stay within [-1, 1]")
    }
}

/// Concatenated tone segments. With a non-zero rate jitter, one speaking
/// rate drawn uniformly from `1 +/- rate_jitter` stretches every token.
pub fn synthesize_ground_truth(seq: &TokenSequence, task: &ToyTask, rng: &mut impl Rng) -> GroundTruth {
    let rate = if task.rate_jitter > 0.0 {
        rng.random_range(1.0 - task.rate_jitter..=1.0 + task.rate_jitter)
    } else {
        1.0
    };
    let hop = task.samples_per_step();
    let sr = task.sample_rate as f64;
    let durations: Vec<usize> = seq.valid_ids().iter().map(|&id| task.token_steps(id, rate)).collect();
    let total_steps = durations.iter().sum();
    let mut waveform = Vec::with_capacity(total_steps * hop);
    for (&id, &steps) in seq.valid_ids().iter().zip(&durations) {
        let n = steps * hop;
        if id == SILENCE {
            waveform.extend(std::iter::repeat_n(0.0, n));
        } else {
            let f = task.tone_frequency(id - 1);
            waveform.extend(
                (0..n).map(|s| task.amplitude * (2.0 * std::f64::consts::PI * f * s as f64 / sr).sin()),
            );
        }
    }
    GroundTruth {
        waveform,
        durations,
        total_steps,
        rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::MelFrontend;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_are_consistent() {
        let task = ToyTask::default();
        task.validate().unwrap();
        assert_eq!(task.samples_per_step(), 120);
        assert_eq!(task.vocab_size(), 9);
        let steps: Vec<usize> = (1..=8).map(|id| task.token_steps(id, 1.0)).collect();
        assert_eq!(steps, vec![4, 5, 6, 6, 7, 8, 9, 10]);
        assert_eq!(task.token_steps(SILENCE, 1.0), 2);
        assert_eq!(task.tone_frequency(7), 900.0);
        let bad = ToyTask {
            num_tones: 8,
            frequency_step: 400.0,
            ..ToyTask::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn substitutions() {
        let t = SubstitutionTable::default();
        assert_eq!(t.apply(";"), ".");
        assert_eq!(t.apply("xçɬʲ—"), "kklj.");
        assert_eq!(t.apply("¡a~r\"e"), "ae");
        let raw = "x;ç a—ʲ¡ɬ\"~r";
        let once = t.apply(raw);
        assert_eq!(t.apply(&once), once);
    }

    #[test]
    fn preprocessing_wraps_in_silence() {
        let task = ToyTask::default();
        let t = SubstitutionTable::default();
        let empty = preprocess_tokens("", &t, &task).unwrap();
        assert_eq!(empty.valid_ids(), &[SILENCE, SILENCE]);
        assert_eq!(empty.true_length(), 2);
        assert_eq!(empty.padded_length(), 16);
        let s = preprocess_tokens("a x;", &t, &task).unwrap();
        assert_eq!(s.valid_ids(), &[0, 1, 5, 8, 0]);
        match preprocess_tokens("aqz", &t, &task) {
            Err(Error::UnknownSymbol(sym)) => assert_eq!(sym, "q"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_tone_ground_truth() {
        let task = ToyTask::default();
        let seq = task.wrap(&[1]).unwrap();
        let gt = synthesize_ground_truth(&seq, &task, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(gt.durations, vec![2, 4, 2]);
        assert_eq!(gt.total_steps, 8);
        assert_eq!(gt.waveform.len(), 8 * 120);
        assert!(gt.waveform[..240].iter().all(|&v| v == 0.0));
        assert!(gt.waveform[720..].iter().all(|&v| v == 0.0));
        // 0.10 s of 200 Hz: twenty full periods of 24 samples
        let tone = &gt.waveform[240..720];
        assert!((tone[6] - 0.5).abs() < 1e-12);
        assert!(tone.iter().all(|v| v.abs() <= 0.5 + 1e-12));
    }

    #[test]
    fn stochastic_lengths_sum_to_total() {
        let task = ToyTask::stochastic();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut totals = std::collections::BTreeSet::new();
        for _ in 0..50 {
            let seq = task.wrap(&[3, 3, 3, 3, 3, 3]).unwrap();
            let gt = synthesize_ground_truth(&seq, &task, &mut rng);
            assert!((0.9..=1.1).contains(&gt.rate));
            assert_eq!(gt.total_steps, gt.durations.iter().sum::<usize>());
            assert_eq!(gt.waveform.len(), gt.total_steps * 120);
            totals.insert(gt.total_steps);
        }
        assert!(totals.len() > 1);
    }

    #[test]
    fn tone_lands_in_its_mel_bin() {
        // tone 2 is 400 Hz
        let task = ToyTask::default();
        let seq = task.wrap(&[3, 3, 3, 3]).unwrap();
        let gt = synthesize_ground_truth(&seq, &task, &mut ChaCha8Rng::seed_from_u64(2));
        let frontend = MelFrontend::new(task.mel.clone()).unwrap();
        let mel = frontend.compute(&gt.mu_law(), true).unwrap();
        let centres = crate::signal::mel_band_centres(&task.mel);
        let edges: Vec<f64> = {
            let lo = crate::signal::hertz_to_mel(task.mel.lower_edge_hz);
            let hi = crate::signal::hertz_to_mel(task.mel.upper_edge_hz);
            let n = task.mel.num_bins;
            (0..n + 2)
                .map(|i| crate::signal::mel_to_hertz(lo + (hi - lo) * i as f64 / (n + 1) as f64))
                .collect()
        };
        let expected = (0..task.mel.num_bins)
            .min_by(|&a, &b| (centres[a] - 400.0).abs().total_cmp(&(centres[b] - 400.0).abs()))
            .unwrap();
        assert!(edges[expected] < 400.0 && 400.0 < edges[expected + 2]);
        // frames fully inside the tone region
        for t in 3..8 {
            let row = mel.values.row(t);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }
}
