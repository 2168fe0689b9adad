//! Toy training loop.

use std::time::Instant;

use rand::Rng;

use crate::aligner::{Conditioning, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::{
    adv_generator_loss, ensemble_hinge_loss, hinge_discriminator_gradients, total_generator_loss,
    ConvScorer, LossBreakdown, LossWeights, PredictionLoss, Scorer,
};
use crate::nn::{Gradients, NormMode, ParamStore};
use crate::rng::substream;
use crate::signal::window::{draw_jitter, post_pad};
use crate::signal::MelFrontend;
use crate::softdtw::DtwConfig;

use super::generator::{Example, Generator, ModelConfig, Objective, TOY_SIGMA2};
use super::task::{synthesize_ground_truth, GroundTruth, ToyTask};

/// Random window discriminator sizes at the toy sample rate.
pub const TOY_RWD_SIZES: [usize; 5] = [48, 96, 192, 384, 720];
/// Samples per frame inside the toy scorers.
const SCORER_FOLD: usize = 24;
const SCORER_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    L1,
    SoftDtw,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "dtw" | "soft-dtw" => Ok(Self::SoftDtw),
            other => Err(Error::Config(format!("unknown loss mode {other:?}, expected l1 or dtw"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossMode,
    pub dtw: DtwConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Training window in aligner steps.
    pub window_steps: usize,
    pub adversarial: bool,
    pub ema_decay: Option<f64>,
    pub norm_mode: NormMode,
    /// Interpolation temperature of the aligner.
    pub sigma2: f64,
    /// Batches pooled for standing statistics in batch-norm mode.
    pub standing_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            seed: 0,
            loss: LossMode::SoftDtw,
            dtw: DtwConfig::default(),
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
            window_steps: 20,
            adversarial: false,
            ema_decay: None,
            norm_mode: NormMode::Instance,
            sigma2: TOY_SIGMA2,
            standing_batches: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.window_steps == 0 {
            return Err(Error::Config("steps, batch and window must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("EMA decay {d} not in [0, 1)")));
            }
        }
        self.weights.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            pred: match self.loss {
                LossMode::L1 => PredictionLoss::L1,
                LossMode::SoftDtw => PredictionLoss::SoftDtw(self.dtw),
            },
            weights: self.weights,
        }
    }

    /// Zero length weight leaves utterance length unconstrained; such runs
    /// are not expected to learn durations.
    pub fn expected_to_fail(&self) -> bool {
        self.weights.lambda_length == 0.0
    }
}

/// Cosine decay from `base` at step 0 to zero at the last step.
pub fn cosine_learning_rate(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    (base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

/// Adaptive-moment optimiser with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            for (w, &gi) in params.get_mut(id).iter_mut().zip(g) {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.epsilon);
                k += 1;
            }
        }
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<f64>,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.flatten(),
        }
    }

    pub fn update(&mut self, params: &ParamStore) {
        for (s, p) in self.shadow.iter_mut().zip(params.flatten()) {
            *s = self.decay * *s + (1.0 - self.decay) * p;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.shadow
    }
}

/// Draws an utterance, a window of it and the jittered ground-truth mel.
pub fn sample_example(
    task: &ToyTask,
    frontend: &MelFrontend,
    window_steps: usize,
    rng: &mut impl Rng,
) -> Result<(Example, GroundTruth)> {
    let tones = task.random_tones(rng);
    let seq = task.wrap(&tones)?;
    let gt = synthesize_ground_truth(&seq, task, rng);
    let offset = rng.random_range(0..=gt.total_steps.saturating_sub(window_steps));
    let shift = draw_jitter(task.mel.max_jitter, rng);
    let cond = Conditioning::sample(rng, 0);
    let example = window_example(task, frontend, seq, cond, &gt, offset, window_steps, shift)?;
    Ok((example, gt))
}

/// Builds the example for a fixed window and jitter.
#[allow(clippy::too_many_arguments)]
pub fn window_example(
    task: &ToyTask,
    frontend: &MelFrontend,
    seq: TokenSequence,
    cond: Conditioning,
    gt: &GroundTruth,
    offset: usize,
    window_steps: usize,
    shift: isize,
) -> Result<Example> {
    let hop = task.samples_per_step();
    let audio = gt.mu_law();
    let start = (offset * hop).min(audio.len());
    let end = ((offset + window_steps) * hop).min(audio.len());
    let gt_audio = post_pad(&audio[start..end], window_steps * hop);
    let gt_mel = frontend.forward(&gt_audio, true, shift)?.0.values;
    Ok(Example {
        seq,
        cond,
        target_steps: gt.total_steps as f64,
        offset: offset as i64,
        window_steps,
        gt_mel,
        gt_audio,
    })
}

pub fn sample_batch(
    task: &ToyTask,
    frontend: &MelFrontend,
    window_steps: usize,
    batch: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<Example>> {
    let mut rng = substream(seed, stream);
    (0..batch)
        .map(|_| Ok(sample_example(task, frontend, window_steps, &mut rng)?.0))
        .collect()
}

/// Ensemble of toy random window discriminators.
pub struct Discriminators {
    pub scorers: Vec<ConvScorer>,
    pub params: ParamStore,
    adam: Adam,
}

impl Discriminators {
    pub fn new(seed: u64, config: &TrainConfig) -> Result<Self> {
        let mut rng = substream(seed, 1);
        let mut params = ParamStore::new();
        let scorers = TOY_RWD_SIZES
            .iter()
            .map(|&size| {
                ConvScorer::new(&mut params, &format!("rwd{size}"), size, SCORER_FOLD, SCORER_CHANNELS, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(params.num_scalars(), config.beta1, config.beta2, config.epsilon);
        Ok(Self {
            scorers,
            params,
            adam,
        })
    }

    /// One random sub-window offset per scorer and example.
    fn offsets(&self, window_len: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        (0..batch)
            .map(|_| {
                self.scorers
                    .iter()
                    .map(|s| rng.random_range(0..=window_len - s.window_len()))
                    .collect()
            })
            .collect()
    }

    /// Generator adversarial loss and its waveform cotangents, scaled for a
    /// batch mean.
    fn generator_side(&self, fakes: &[Vec<f64>], offsets: &[Vec<usize>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut scores = Vec::new();
        let mut d_waves = Vec::with_capacity(fakes.len());
        let count = (fakes.len() * self.scorers.len()) as f64;
        let mut scratch = self.params.zero_grads();
        for (fake, offs) in fakes.iter().zip(offsets) {
            let mut d_wave = vec![0.0; fake.len()];
            for (scorer, &o) in self.scorers.iter().zip(offs) {
                let w = &fake[o..o + scorer.window_len()];
                scores.push(scorer.score(&self.params, w)?);
                let dw = scorer.backward(&self.params, w, -1.0 / count, &mut scratch)?;
                d_wave[o..o + dw.len()].iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            }
            d_waves.push(d_wave);
        }
        let (adv, _) = adv_generator_loss(&scores)?;
        Ok((adv, d_waves))
    }

    /// One hinge-loss update; returns the ensemble loss before the update.
    fn update(&mut self, reals: &[&[f64]], fakes: &[Vec<f64>], offsets: &[Vec<usize>], lr: f64) -> Result<f64> {
        let mut grads = self.params.zero_grads();
        let mut real_scores = Vec::new();
        let mut fake_scores = Vec::new();
        let count = (fakes.len() * self.scorers.len()) as f64;
        for ((real, fake), offs) in reals.iter().zip(fakes).zip(offsets) {
            for (scorer, &o) in self.scorers.iter().zip(offs) {
                let r = &real[o..o + scorer.window_len()];
                let f = &fake[o..o + scorer.window_len()];
                let sr = scorer.score(&self.params, r)?;
                let sf = scorer.score(&self.params, f)?;
                let (gr, gf) = hinge_discriminator_gradients(sr, sf);
                scorer.backward(&self.params, r, gr / count, &mut grads)?;
                scorer.backward(&self.params, f, gf / count, &mut grads)?;
                real_scores.push(sr);
                fake_scores.push(sf);
            }
        }
        let loss = ensemble_hinge_loss(&real_scores, &fake_scores)?;
        self.adam.step(&mut self.params, &grads, lr);
        Ok(loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: Generator,
    pub history: Vec<LossBreakdown>,
    /// Discriminator hinge loss per step, adversarial runs only.
    pub discriminator: Vec<f64>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn csv(&self) -> String {
        let mut out = String::from(crate::losses::CSV_HEADER);
        out.push('\n');
        for (step, b) in self.history.iter().enumerate() {
            out.push_str(&b.csv_row(step));
            out.push('\n');
        }
        out
    }
}

/// Trains a fresh toy generator. `progress` sees every step's losses.
pub fn train(
    task: &ToyTask,
    config: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(usize, &LossBreakdown)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    task.validate()?;
    let began = Instant::now();
    let mut model = ModelConfig::toy(task);
    model.aligner.norm_mode = config.norm_mode;
    model.aligner.sigma2 = config.sigma2;
    let mut gen = Generator::new(task.clone(), model, config.seed)?;
    let objective = config.objective();
    let mut adam = Adam::new(gen.params.num_scalars(), config.beta1, config.beta2, config.epsilon);
    let mut ema = config.ema_decay.map(|d| Ema::new(&gen.params, d));
    let mut discs = if config.adversarial {
        Some(Discriminators::new(config.seed, config)?)
    } else {
        None
    };
    let mut history = Vec::with_capacity(config.steps);
    let mut disc_history = Vec::new();
    let data_seed = config.seed;

    for step in 0..config.steps {
        let examples = sample_batch(
            task,
            gen.frontend(),
            config.window_steps,
            config.batch,
            data_seed,
            (1 << 32) + step as u64,
        )?;
        let fwd = gen.forward_batch(&examples, &objective, true).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                step,
                loss: f64::NAN,
            },
            other => other,
        })?;
        let lr = cosine_learning_rate(config.learning_rate, step, config.steps);
        let mut grads = gen.params.zero_grads();
        let mut breakdown = fwd.breakdown;
        if let Some(d) = discs.as_mut() {
            let mut rng = substream(data_seed, (2 << 32) + step as u64);
            let window_len = config.window_steps * task.samples_per_step();
            let offsets = d.offsets(window_len, examples.len(), &mut rng);
            let (adv, d_waves) = d.generator_side(&fwd.waveforms, &offsets)?;
            gen.backward_batch(&fwd, &objective, Some(&d_waves), &mut grads);
            breakdown = total_generator_loss(adv, breakdown.pred, breakdown.length, &objective.weights);
            let reals: Vec<&[f64]> = examples.iter().map(|e| e.gt_audio.as_slice()).collect();
            disc_history.push(d.update(&reals, &fwd.waveforms, &offsets, lr)?);
        } else {
            gen.backward_batch(&fwd, &objective, None, &mut grads);
        }
        if !breakdown.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                loss: breakdown.total,
            });
        }
        adam.step(&mut gen.params, &grads, lr);
        if let Some(e) = ema.as_mut() {
            e.update(&gen.params);
        }
        if let Some(cb) = progress.as_mut() {
            cb(step, &breakdown);
        }
        history.push(breakdown);
    }

    if let Some(e) = &ema {
        gen.params.set_flat(e.values());
    }
    if config.norm_mode == NormMode::Batch {
        let batches = (0..config.standing_batches.max(1))
            .map(|i| {
                let ex = sample_batch(
                    task,
                    gen.frontend(),
                    config.window_steps,
                    config.batch,
                    data_seed,
                    (3 << 32) + i as u64,
                )?;
                Ok((
                    ex.iter().map(|e| e.seq.clone()).collect(),
                    ex.iter().map(|e| e.cond.clone()).collect(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = gen.params.clone();
        gen.aligner.collect_standing_stats(&params, &batches)?;
    }
    Ok(TrainOutcome {
        generator: gen,
        history,
        discriminator: disc_history,
        seconds: began.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_ends_at_zero() {
        assert_eq!(cosine_learning_rate(1e-3, 0, 100), 1e-3);
        assert!((cosine_learning_rate(1e-3, 99, 100)).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = cosine_learning_rate(1e-3, s, 100);
            assert!(lr >= 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_without_momentum_takes_normalised_steps() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[2], vec![1.0, -1.0]);
        let mut grads = store.zero_grads();
        grads.get_mut(id).copy_from_slice(&[4.0, -0.5]);
        let mut adam = Adam::new(2, 0.0, 0.999, 0.0);
        adam.step(&mut store, &grads, 0.1);
        // first bias-corrected step moves every coordinate by lr * sign(g)
        assert!((store.get(id)[0] - 0.9).abs() < 1e-12);
        assert!((store.get(id)[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn ema_tracks_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[1], vec![0.0]);
        let mut ema = Ema::new(&store, 0.5);
        store.get_mut(id)[0] = 2.0;
        ema.update(&store);
        assert_eq!(ema.values(), &[1.0]);
    }

    #[test]
    fn loss_modes_parse() {
        assert_eq!("l1".parse::<LossMode>().unwrap(), LossMode::L1);
        assert_eq!("dtw".parse::<LossMode>().unwrap(), LossMode::SoftDtw);
        assert!("l2".parse::<LossMode>().is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let task = ToyTask::default();
        let a = train(&task, &quick_config(5), None).unwrap();
        let b = train(&task, &quick_config(5), None).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.history.len(), 3);
        assert!(a.csv().starts_with("step,adv,pred,length,total\n0,0,"));
    }

    #[test]
    fn adversarial_and_batch_norm_paths_run() {
        let task = ToyTask::stochastic();
        let config = TrainConfig {
            adversarial: true,
            norm_mode: NormMode::Batch,
            standing_batches: 1,
            ema_decay: Some(0.9),
            ..quick_config(6)
        };
        let out = train(&task, &config, None).unwrap();
        assert_eq!(out.discriminator.len(), 3);
        assert!(out.history.iter().all(|b| b.adv != 0.0 && b.total.is_finite()));
        assert!(out.generator.aligner.standing.is_some());
    }

    #[test]
    fn zero_length_weight_is_flagged() {
        let mut c = TrainConfig::default();
        assert!(!c.expected_to_fail());
        c.weights.lambda_length = 0.0;
        assert!(c.expected_to_fail());
    }
}
