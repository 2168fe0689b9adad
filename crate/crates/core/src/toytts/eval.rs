//! Duration, held-out loss and speed evaluation of a trained generator.

use std::fmt::Write as _;
use std::time::Instant;

use crate::aligner::{Conditioning, OutputWindow};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PredictionLoss};
use crate::rng::substream;
use crate::softdtw::DtwConfig;

use super::generator::{Generator, Objective};
use super::task::synthesize_ground_truth;
use super::train::sample_batch;

/// Streams at and above this index never feed training.
pub const HELD_OUT_STREAM: u64 = 1 << 48;

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceDurations {
    pub ids: Vec<usize>,
    pub predicted: Vec<f64>,
    pub truth: Vec<usize>,
    pub predicted_total: f64,
    pub true_total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DurationReport {
    pub utterances: Vec<UtteranceDurations>,
    /// `|predicted - true| / true` for every valid token of every utterance.
    pub relative_errors: Vec<f64>,
    pub median_relative_error: f64,
    pub mean_relative_error: f64,
    /// Pearson correlation of predicted and true utterance lengths.
    pub length_correlation: f64,
}

impl DurationReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("utterance,token,id,predicted_steps,true_steps,relative_error\n");
        for (u, utt) in self.utterances.iter().enumerate() {
            for (t, ((&id, &p), &d)) in utt.ids.iter().zip(&utt.predicted).zip(&utt.truth).enumerate() {
                let _ = writeln!(out, "{u},{t},{id},{p:.6},{d},{:.6}", (p - d as f64).abs() / d as f64);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "utterances={} tokens={} median_rel_err={:.4} mean_rel_err={:.4} length_correlation={:.4}",
            self.utterances.len(),
            self.relative_errors.len(),
            self.median_relative_error,
            self.mean_relative_error,
            self.length_correlation
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Predicted against true token durations on `count` held-out utterances,
/// each with its own latent draw.
pub fn eval_durations(gen: &Generator, count: usize, seed: u64) -> Result<DurationReport> {
    if count == 0 {
        return Err(Error::Empty("evaluation utterances"));
    }
    let mut rng = substream(seed, HELD_OUT_STREAM);
    let mut utterances = Vec::with_capacity(count);
    let mut relative_errors = Vec::new();
    for _ in 0..count {
        let tones = gen.task.random_tones(&mut rng);
        let seq = gen.task.wrap(&tones)?;
        let gt = synthesize_ground_truth(&seq, &gen.task, &mut rng);
        let cond = Conditioning::sample(&mut rng, 0);
        let out = gen
            .aligner
            .align(&gen.params, &seq, &cond, OutputWindow::Span { offset: 0, length: 1 })?;
        let predicted = out.token_lengths[..seq.true_length()].to_vec();
        relative_errors.extend(
            predicted
                .iter()
                .zip(&gt.durations)
                .map(|(&p, &d)| (p - d as f64).abs() / d as f64),
        );
        utterances.push(UtteranceDurations {
            ids: seq.valid_ids().to_vec(),
            predicted,
            truth: gt.durations,
            predicted_total: out.predicted_total_length,
            true_total: gt.total_steps,
        });
    }
    let predicted: Vec<f64> = utterances.iter().map(|u| u.predicted_total).collect();
    let truth: Vec<f64> = utterances.iter().map(|u| u.true_total as f64).collect();
    Ok(DurationReport {
        median_relative_error: median(&relative_errors),
        mean_relative_error: relative_errors.iter().sum::<f64>() / relative_errors.len() as f64,
        length_correlation: pearson(&predicted, &truth),
        relative_errors,
        utterances,
    })
}

/// Predicted utterance lengths for one text under `draws` latent samples.
pub fn length_histogram(gen: &Generator, text: &crate::aligner::TokenSequence, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = substream(seed, HELD_OUT_STREAM + 1);
    (0..draws)
        .map(|_| {
            let cond = Conditioning::sample(&mut rng, 0);
            let out = gen
                .aligner
                .align(&gen.params, text, &cond, OutputWindow::Span { offset: 0, length: 1 })?;
            Ok(out.predicted_total_length)
        })
        .collect()
}

pub fn histogram_csv(lengths: &[f64]) -> String {
    let mut out = String::from("draw,total_steps\n");
    for (i, l) in lengths.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:.6}");
    }
    out
}

/// Number of distinct lengths after rounding up to whole aligner steps.
pub fn distinct_step_counts(lengths: &[f64]) -> usize {
    let mut steps: Vec<i64> = lengths.iter().map(|l| l.ceil() as i64).collect();
    steps.sort_unstable();
    steps.dedup();
    steps.len()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOutLoss {
    pub soft_dtw: f64,
    pub l1: f64,
}

/// Mean prediction losses on held-out training-style windows. Both use the
/// same generated audio, so models trained with different objectives are
/// compared on equal terms.
pub fn held_out_prediction_loss(
    gen: &Generator,
    window_steps: usize,
    batches: usize,
    batch: usize,
    seed: u64,
) -> Result<HeldOutLoss> {
    let weights = LossWeights {
        lambda_pred: 1.0,
        lambda_length: 0.0,
    };
    let dtw = Objective {
        pred: PredictionLoss::SoftDtw(DtwConfig::default()),
        weights,
    };
    let l1 = Objective {
        pred: PredictionLoss::L1,
        weights,
    };
    let (mut sum_dtw, mut sum_l1) = (0.0, 0.0);
    for b in 0..batches {
        let examples = sample_batch(&gen.task, gen.frontend(), window_steps, batch, seed, HELD_OUT_STREAM + 2 + b as u64)?;
        sum_dtw += gen.forward_batch(&examples, &dtw, false)?.breakdown.pred;
        sum_l1 += gen.forward_batch(&examples, &l1, false)?.breakdown.pred;
    }
    Ok(HeldOutLoss {
        soft_dtw: sum_dtw / batches as f64,
        l1: sum_l1 / batches as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub batch: usize,
    pub utterance_seconds: f64,
    pub runs: usize,
    pub median_run_time: f64,
    /// Generated audio seconds per wall-clock second.
    pub realtime_factor: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "batch_size,utterance_seconds,runs,median_run_time_s,realtime_factor";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.2}",
            self.batch, self.utterance_seconds, self.runs, self.median_run_time, self.realtime_factor
        )
    }
}

/// Times `runs` batched generations of `batch` utterances, each
/// `utterance_seconds` long.
pub fn bench(gen: &Generator, utterance_seconds: f64, batch: usize, runs: usize, seed: u64) -> Result<BenchReport> {
    if batch == 0 || runs == 0 || !(utterance_seconds > 0.0) {
        return Err(Error::Config("bench needs a positive batch, run count and duration".into()));
    }
    let steps = (utterance_seconds * gen.task.aligner_rate as f64).round().max(1.0) as usize;
    let mut rng = substream(seed, HELD_OUT_STREAM + 3);
    let mut seqs = Vec::with_capacity(batch);
    let mut conds = Vec::with_capacity(batch);
    for _ in 0..batch {
        seqs.push(gen.task.wrap(&gen.task.random_tones(&mut rng))?);
        conds.push(Conditioning::sample(&mut rng, 0));
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let began = Instant::now();
        let out = gen.synthesize_batch(&seqs, &conds, steps)?;
        times.push(began.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let median_run_time = median(&times);
    let generated = (batch * steps * gen.task.samples_per_step()) as f64 / gen.task.sample_rate as f64;
    Ok(BenchReport {
        batch,
        utterance_seconds,
        runs,
        median_run_time,
        realtime_factor: generated / median_run_time,
    })
}
