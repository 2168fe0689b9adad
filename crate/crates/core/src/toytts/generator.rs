//! Aligner plus decoder, and the batched training objective.

use crate::aligner::{
    Aligner, AlignerConfig, AlignerCotangent, AlignerOutput, AlignerTrace, Conditioning,
    OutputWindow, TokenSequence,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{length_loss, total_generator_loss, LossBreakdown, LossWeights, PredictionLoss};
use crate::nn::{Gradients, ParamStore};
use crate::rng::substream;
use crate::signal::{mel_band_centres, MelFrontend, MelTrace};

use super::decoder::{DecoderConfig, DecoderTrace, ToyDecoder, MARGIN};
use super::task::ToyTask;

/// Interpolation temperature at the toy aligner rate.
pub const TOY_SIGMA2: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub aligner: AlignerConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn toy(task: &ToyTask) -> Self {
        let aligner = AlignerConfig {
            sigma2: TOY_SIGMA2,
            initial_length: task.mean_tone_steps(),
            // a near-identity encoder keeps each slot's features tied to
            // its own token while the lengths are still wrong
            residual_gain: 0.1,
            ..AlignerConfig::toy(task.vocab_size(), 1)
        };
        let decoder = DecoderConfig::toy(
            aligner.channels,
            mel_band_centres(&task.mel),
            task.sample_rate as f64,
        );
        Self { aligner, decoder }
    }
}

/// One training example: a window of `window_steps` aligner steps starting
/// at `offset`, and the ground-truth log-mel of that window.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seq: TokenSequence,
    pub cond: Conditioning,
    /// Ground-truth utterance length in aligner steps.
    pub target_steps: f64,
    pub offset: i64,
    pub window_steps: usize,
    pub gt_mel: Grid,
    /// Ground-truth mu-law samples of the window, without jitter.
    pub gt_audio: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub pred: PredictionLoss,
    pub weights: LossWeights,
}

/// A synthesised span of audio in the mu-law domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub waveform: Vec<f64>,
    /// First aligner step of `waveform`.
    pub start: i64,
    pub alignment: AlignerOutput,
}

/// Saved state of a batched forward pass.
pub struct BatchForward {
    pub breakdown: LossBreakdown,
    pub per_example: Vec<LossBreakdown>,
    pub waveforms: Vec<Vec<f64>>,
    pub outputs: Vec<AlignerOutput>,
    trace: AlignerTrace,
    decoder_traces: Vec<DecoderTrace>,
    mel_traces: Vec<MelTrace>,
    pred_grads: Vec<Grid>,
    length_diffs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub task: ToyTask,
    pub config: ModelConfig,
    pub aligner: Aligner,
    pub decoder: ToyDecoder,
    pub params: ParamStore,
    frontend: MelFrontend,
}

impl Generator {
    pub fn new(task: ToyTask, config: ModelConfig, seed: u64) -> Result<Self> {
        task.validate()?;
        if config.aligner.vocab_size != task.vocab_size() {
            return Err(Error::Config(format!(
                "aligner vocabulary {} does not match the task's {}",
                config.aligner.vocab_size,
                task.vocab_size()
            )));
        }
        if config.decoder.in_channels != config.aligner.channels {
            return Err(Error::Config("decoder input width differs from aligner width".into()));
        }
        let mut rng = substream(seed, 0);
        let mut params = ParamStore::new();
        let aligner = Aligner::new(&mut params, config.aligner.clone(), &mut rng)?;
        let decoder = ToyDecoder::new(&mut params, config.decoder.clone(), task.samples_per_step(), &mut rng)?;
        let frontend = MelFrontend::new(task.mel.clone())?;
        Ok(Self {
            task,
            config,
            aligner,
            decoder,
            params,
            frontend,
        })
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    /// The whole utterance, `max(1, ceil(total))` steps long.
    pub fn synthesize(&self, seq: &TokenSequence, cond: &Conditioning) -> Result<Synthesis> {
        let alignment = self
            .aligner
            .align(&self.params, seq, cond, OutputWindow::Padded { margin: MARGIN })?;
        let (waveform, _) = self.decoder.forward(&self.params, &alignment.features, 0)?;
        Ok(Synthesis {
            waveform,
            start: 0,
            alignment,
        })
    }

    /// `steps` aligner steps starting at `start`.
    pub fn synthesize_span(
        &self,
        seq: &TokenSequence,
        cond: &Conditioning,
        start: i64,
        steps: usize,
    ) -> Result<Synthesis> {
        let window = OutputWindow::Span {
            offset: start - MARGIN as i64,
            length: steps + 2 * MARGIN,
        };
        let alignment = self.aligner.align(&self.params, seq, cond, window)?;
        let (waveform, _) = self.decoder.forward(&self.params, &alignment.features, start)?;
        Ok(Synthesis {
            waveform,
            start,
            alignment,
        })
    }

    /// Synthesises a batch of spans in one aligner pass.
    pub fn synthesize_batch(
        &self,
        seqs: &[TokenSequence],
        conds: &[Conditioning],
        steps: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let window = OutputWindow::Span {
            offset: -(MARGIN as i64),
            length: steps + 2 * MARGIN,
        };
        let windows = vec![window; seqs.len()];
        let (outs, _) = self.aligner.forward(&self.params, seqs, conds, &windows, false)?;
        outs.iter()
            .map(|o| Ok(self.decoder.forward(&self.params, &o.features, 0)?.0))
            .collect()
    }

    pub fn forward_batch(
        &self,
        examples: &[Example],
        objective: &Objective,
        training: bool,
    ) -> Result<BatchForward> {
        let seqs: Vec<TokenSequence> = examples.iter().map(|e| e.seq.clone()).collect();
        let conds: Vec<Conditioning> = examples.iter().map(|e| e.cond.clone()).collect();
        let windows: Vec<OutputWindow> = examples
            .iter()
            .map(|e| OutputWindow::Span {
                offset: e.offset - MARGIN as i64,
                length: e.window_steps + 2 * MARGIN,
            })
            .collect();
        let (outputs, trace) = self.aligner.forward(&self.params, &seqs, &conds, &windows, training)?;

        let batch = examples.len();
        let mut waveforms = Vec::with_capacity(batch);
        let mut decoder_traces = Vec::with_capacity(batch);
        let mut mel_traces = Vec::with_capacity(batch);
        let mut pred_grads = Vec::with_capacity(batch);
        let mut length_diffs = Vec::with_capacity(batch);
        let mut per_example = Vec::with_capacity(batch);
        for (ex, out) in examples.iter().zip(&outputs) {
            let (wave, dtrace) = self.decoder.forward(&self.params, &out.features, ex.offset)?;
            let (mel, mtrace) = self.frontend.forward(&wave, true, 0)?;
            let (pred, grad) = objective.pred.evaluate(&mel.values, &ex.gt_mel)?;
            let valid = &out.token_lengths[..ex.seq.true_length()];
            let (length, diff) = length_loss(valid, ex.target_steps);
            per_example.push(total_generator_loss(0.0, pred, length, &objective.weights));
            waveforms.push(wave);
            decoder_traces.push(dtrace);
            mel_traces.push(mtrace);
            pred_grads.push(grad);
            length_diffs.push(diff.first().copied().unwrap_or(0.0));
        }
        let n = batch as f64;
        let pred = per_example.iter().map(|b| b.pred).sum::<f64>() / n;
        let length = per_example.iter().map(|b| b.length).sum::<f64>() / n;
        let breakdown = total_generator_loss(0.0, pred, length, &objective.weights);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("generator loss".into()));
        }
        Ok(BatchForward {
            breakdown,
            per_example,
            waveforms,
            outputs,
            trace,
            decoder_traces,
            mel_traces,
            pred_grads,
            length_diffs,
        })
    }

    /// Gradient of the batch-mean objective. `wave_grads` adds cotangents
    /// on the generated windows, already scaled by the caller.
    pub fn backward_batch(
        &self,
        fwd: &BatchForward,
        objective: &Objective,
        wave_grads: Option<&[Vec<f64>]>,
        grads: &mut Gradients,
    ) {
        let batch = fwd.waveforms.len();
        let n = batch as f64;
        let lp = objective.weights.lambda_pred / n;
        let ll = objective.weights.lambda_length / n;
        let mut cots = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut d_wave = if lp != 0.0 {
                let mut g = fwd.pred_grads[b].clone();
                g.scale(lp);
                self.frontend.backward(&fwd.mel_traces[b], &g)
            } else {
                vec![0.0; fwd.waveforms[b].len()]
            };
            if let Some(extra) = wave_grads {
                d_wave.iter_mut().zip(&extra[b]).for_each(|(a, e)| *a += e);
            }
            let d_features = if d_wave.iter().any(|&g| g != 0.0) {
                self.decoder.backward(&self.params, &fwd.decoder_traces[b], &d_wave, grads)
            } else {
                Grid::zeros(fwd.outputs[b].features.rows(), fwd.outputs[b].features.cols())
            };
            cots.push(AlignerCotangent {
                features: d_features,
                total_length: ll * fwd.length_diffs[b],
                token_lengths: None,
            });
        }
        self.aligner.backward(&self.params, &fwd.trace, &cots, grads);
    }

    /// Loss and gradient of the batch-mean objective.
    pub fn loss_and_gradients(
        &self,
        examples: &[Example],
        objective: &Objective,
    ) -> Result<(LossBreakdown, Gradients)> {
        let fwd = self.forward_batch(examples, objective, true)?;
        let mut grads = self.params.zero_grads();
        self.backward_batch(&fwd, objective, None, &mut grads);
        Ok((fwd.breakdown, grads))
    }
}
