//! Generator and discriminator objectives.
//!
//! The L1 spectrogram loss is normalised by the number of mel bins only, so
//! its scale grows with the window length.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{relu, relu_backward, Conv1d, Gradients, ParamStore};
use crate::softdtw::{soft_dtw, DtwConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_pred: f64,
    pub lambda_length: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pred: 1.0,
            lambda_length: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pred >= 0.0 && self.lambda_length >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {} and {}",
                self.lambda_pred, self.lambda_length
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub adv: f64,
    pub pred: f64,
    pub length: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.adv, self.pred, self.length, self.total)
    }
}

pub const CSV_HEADER: &str = "step,adv,pred,length,total";

pub fn total_generator_loss(adv: f64, pred: f64, length: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        adv,
        pred,
        length,
        total: adv + weights.lambda_pred * pred + weights.lambda_length * length,
    }
}

fn check_same_shape(a: &Grid, b: &Grid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "spectrogram shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.cols() == 0 {
        return Err(Error::Empty("spectrogram without mel bins"));
    }
    Ok(())
}

/// `sum |gen - gt| / F` and its gradient with respect to `gen`.
pub fn l1_spectrogram_loss(gen: &Grid, gt: &Grid) -> Result<(f64, Grid)> {
    check_same_shape(gen, gt)?;
    let f = gen.cols() as f64;
    let mut grad = Grid::zeros(gen.rows(), gen.cols());
    let mut sum = 0.0;
    for (g, (a, b)) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(gen.as_slice().iter().zip(gt.as_slice()))
    {
        let d: f64 = a - b;
        sum += d.abs();
        if d != 0.0 {
            *g = d.signum() / f;
        }
    }
    Ok((sum / f, grad))
}

/// `0.5 * (target - sum(l))^2`; the gradient is the same for every token.
pub fn length_loss(lengths: &[f64], target: f64) -> (f64, Vec<f64>) {
    let predicted: f64 = lengths.iter().sum();
    let diff = predicted - target;
    (0.5 * diff * diff, vec![diff; lengths.len()])
}

pub fn hinge_discriminator_loss(d_real: f64, d_fake: f64) -> f64 {
    (1.0 - d_real).max(0.0) + (1.0 + d_fake).max(0.0)
}

/// Gradients of the hinge loss with respect to the real and fake scores.
pub fn hinge_discriminator_gradients(d_real: f64, d_fake: f64) -> (f64, f64) {
    let gr = if d_real < 1.0 { -1.0 } else { 0.0 };
    let gf = if d_fake > -1.0 { 1.0 } else { 0.0 };
    (gr, gf)
}

/// Mean hinge loss over an ensemble of discriminators.
pub fn ensemble_hinge_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_real.len() != d_fake.len() {
        return Err(Error::Shape(format!(
            "{} real and {} fake scores",
            d_real.len(),
            d_fake.len()
        )));
    }
    let sum: f64 = d_real
        .iter()
        .zip(d_fake)
        .map(|(&r, &f)| hinge_discriminator_loss(r, f))
        .sum();
    Ok(sum / d_real.len() as f64)
}

/// `-mean(scores)` and its gradient.
pub fn adv_generator_loss(d_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    if d_fake.is_empty() {
        return Err(Error::Empty("discriminator scores"));
    }
    let n = d_fake.len() as f64;
    Ok((-d_fake.iter().sum::<f64>() / n, vec![-1.0 / n; d_fake.len()]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PredictionLoss {
    L1,
    SoftDtw(DtwConfig),
}

impl PredictionLoss {
    pub fn evaluate(&self, gen: &Grid, gt: &Grid) -> Result<(f64, Grid)> {
        match self {
            Self::L1 => l1_spectrogram_loss(gen, gt),
            Self::SoftDtw(cfg) => {
                let r = soft_dtw(gen, gt, cfg)?;
                Ok((r.value, r.grad_gen))
            }
        }
    }
}

/// Anything that maps an audio window to a scalar score.
pub trait Scorer {
    fn window_len(&self) -> usize;

    fn score(&self, p: &ParamStore, window: &[f64]) -> Result<f64>;

    /// Adds `d_score * d(score)/d(params)` to `grads` and returns
    /// `d_score * d(score)/d(window)`.
    fn backward(
        &self,
        p: &ParamStore,
        window: &[f64],
        d_score: f64,
        grads: &mut Gradients,
    ) -> Result<Vec<f64>>;
}

/// Folds the window into frames of `factor` samples, applies two ReLU
/// convolutions and a pointwise projection, and averages over frames.
#[derive(Clone, Debug)]
pub struct ConvScorer {
    pub window_len: usize,
    pub factor: usize,
    conv_a: Conv1d,
    conv_b: Conv1d,
    out: Conv1d,
}

struct ScorerTrace {
    x: Grid,
    pre_a: Grid,
    pre_b: Grid,
}

impl ConvScorer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        window_len: usize,
        factor: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if factor == 0 || window_len % factor != 0 {
            return Err(Error::Config(format!(
                "window of {window_len} samples does not fold into frames of {factor}"
            )));
        }
        Ok(Self {
            window_len,
            factor,
            conv_a: Conv1d::new(store, &format!("{name}/conv_a"), factor, channels, 3, 1, 1.0, rng),
            conv_b: Conv1d::new(store, &format!("{name}/conv_b"), channels, channels, 3, 2, 1.0, rng),
            out: Conv1d::new(store, &format!("{name}/out"), channels, 1, 1, 1, 1.0, rng),
        })
    }

    fn run(&self, p: &ParamStore, window: &[f64]) -> Result<(f64, ScorerTrace)> {
        if window.len() != self.window_len {
            return Err(Error::Shape(format!(
                "scorer expects {} samples, got {}",
                self.window_len,
                window.len()
            )));
        }
        let x = Grid::from_vec(window.len() / self.factor, self.factor, window.to_vec())?;
        let pre_a = self.conv_a.forward(p, &x, None);
        let pre_b = self.conv_b.forward(p, &relu(&pre_a), None);
        let y = self.out.forward(p, &relu(&pre_b), None);
        let score = y.as_slice().iter().sum::<f64>() / y.rows() as f64;
        Ok((score, ScorerTrace { x, pre_a, pre_b }))
    }
}

impl Scorer for ConvScorer {
    fn window_len(&self) -> usize {
        self.window_len
    }

    fn score(&self, p: &ParamStore, window: &[f64]) -> Result<f64> {
        Ok(self.run(p, window)?.0)
    }

    fn backward(
        &self,
        p: &ParamStore,
        window: &[f64],
        d_score: f64,
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let (_, tr) = self.run(p, window)?;
        let frames = tr.x.rows();
        let dy = Grid::filled(frames, 1, d_score / frames as f64);
        let da = self.out.backward(p, &relu(&tr.pre_b), None, &dy, grads);
        let db = relu_backward(&tr.pre_b, &da);
        let dm = self.conv_b.backward(p, &relu(&tr.pre_a), None, &db, grads);
        let dp = relu_backward(&tr.pre_a, &dm);
        Ok(self.conv_a.backward(p, &tr.x, None, &dp, grads).into_vec())
    }
}
