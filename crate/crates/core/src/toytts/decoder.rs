//! Small upsampling decoder.
//!
//! Nearest-neighbour upsampling and convolution stages turn aligned features
//! into per-sample amplitudes for a fixed bank of sinusoidal carriers. The
//! modulated carriers are summed, squashed with `tanh` and mu-law encoded,
//! so the output lives in the same domain as the training audio. Carrier phase is
//! taken from the absolute sample index, so decoding a window gives exactly
//! the matching slice of a full decode.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::signal::mulaw::{encode_derivative, encode_sample, MU};
use crate::nn::{leaky_relu, leaky_relu_backward, upsample_nearest, upsample_nearest_backward, Conv1d, Gradients, ParamStore};

/// Extra aligner steps decoded on either side of a window and then dropped.
pub const MARGIN: usize = 1;
/// Negative slope of the hidden activations.
pub const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub in_channels: usize,
    pub factors: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Output channels of every stage but the last, which has one per
    /// carrier.
    pub hidden: Vec<usize>,
    pub carriers: Vec<f64>,
    pub sample_rate: f64,
    /// Initialisation gain of the last stage; small values start quiet.
    pub output_gain: f64,
}

impl DecoderConfig {
    pub fn toy(in_channels: usize, carriers: Vec<f64>, sample_rate: f64) -> Self {
        Self {
            in_channels,
            factors: vec![4, 5, 6],
            kernels: vec![3, 3, 1],
            hidden: vec![16, 16],
            carriers,
            sample_rate,
            output_gain: 0.1,
        }
    }

    pub fn upsampling(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn validate(&self, samples_per_step: usize) -> Result<()> {
        let stages = self.factors.len();
        if stages == 0 || self.kernels.len() != stages || self.hidden.len() + 1 != stages {
            return Err(Error::Config(format!(
                "{} factors, {} kernels and {} hidden widths do not describe a stage stack",
                self.factors.len(),
                self.kernels.len(),
                self.hidden.len()
            )));
        }
        if self.upsampling() != samples_per_step {
            return Err(Error::Config(format!(
                "stage factors {:?} multiply to {}, not the {samples_per_step} samples per step",
                self.factors,
                self.upsampling()
            )));
        }
        if self.carriers.is_empty() {
            return Err(Error::Config("decoder needs at least one carrier".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyDecoder {
    pub config: DecoderConfig,
    stages: Vec<Conv1d>,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// Upsampled input of every stage.
    inputs: Vec<Grid>,
    /// Output of every stage before its activation.
    pre: Vec<Grid>,
    carriers: Grid,
    /// Linear-amplitude samples before companding.
    linear: Vec<f64>,
}

impl ToyDecoder {
    pub fn new(
        store: &mut ParamStore,
        config: DecoderConfig,
        samples_per_step: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(samples_per_step)?;
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (i, &k) in config.kernels.iter().enumerate() {
            let cout = config.hidden.get(i).copied().unwrap_or(config.carriers.len());
            let gain = if i + 1 == config.kernels.len() { config.output_gain } else { 1.0 };
            stages.push(Conv1d::new(store, &format!("decoder/stage{i}"), cin, cout, k, 1, gain, rng));
            cin = cout;
        }
        Ok(Self { config, stages })
    }

    /// `rows x carriers` grid of carrier values for absolute samples
    /// `first_sample..first_sample + rows`.
    fn carriers(&self, first_sample: i64, rows: usize) -> Grid {
        let sr = self.config.sample_rate;
        let freqs = &self.config.carriers;
        Grid::from_fn(rows, freqs.len(), |s, f| {
            let n = (first_sample + s as i64) as f64;
            (2.0 * PI * freqs[f] * n / sr).sin()
        })
    }

    /// Decodes `features`, whose rows are aligner steps
    /// `start - MARGIN .. start + S + MARGIN`, into the `S * upsampling`
    /// samples starting at step `start`.
    pub fn forward(&self, p: &ParamStore, features: &Grid, start: i64) -> Result<(Vec<f64>, DecoderTrace)> {
        if features.rows() <= 2 * MARGIN {
            return Err(Error::Shape(format!(
                "decoder input of {} steps leaves nothing inside the margins",
                features.rows()
            )));
        }
        if features.cols() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {}",
                self.config.in_channels,
                features.cols()
            )));
        }
        let up = self.config.upsampling();
        let steps = features.rows() - 2 * MARGIN;
        let last = self.stages.len() - 1;
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut pre = Vec::with_capacity(self.stages.len());
        let mut x = features.clone();
        for (i, (conv, &factor)) in self.stages.iter().zip(&self.config.factors).enumerate() {
            let u = upsample_nearest(&x, factor);
            let y = conv.forward(p, &u, None);
            x = if i == last { y.clone() } else { leaky_relu(&y, LEAK) };
            inputs.push(u);
            pre.push(y);
        }
        let amps = &pre[last];
        let first = MARGIN * up;
        let carriers = self.carriers(start * up as i64, steps * up);
        let linear: Vec<f64> = (0..steps * up)
            .map(|s| {
                amps.row(first + s)
                    .iter()
                    .zip(carriers.row(s))
                    .map(|(a, c)| a * c)
                    .sum::<f64>()
                    .tanh()
            })
            .collect();
        let output = linear.iter().map(|&x| encode_sample(x, MU)).collect();
        let trace = DecoderTrace {
            inputs,
            pre,
            carriers,
            linear,
        };
        Ok((output, trace))
    }

    /// Returns the cotangent of the input features.
    pub fn backward(&self, p: &ParamStore, trace: &DecoderTrace, d_out: &[f64], grads: &mut Gradients) -> Grid {
        let up = self.config.upsampling();
        let last = self.stages.len() - 1;
        let amps = &trace.pre[last];
        let mut d_y = Grid::zeros(amps.rows(), amps.cols());
        let first = MARGIN * up;
        for (s, (&g, &y)) in d_out.iter().zip(&trace.linear).enumerate() {
            let d_sum = g * encode_derivative(y, MU) * (1.0 - y * y);
            for (d, c) in d_y.row_mut(first + s).iter_mut().zip(trace.carriers.row(s)) {
                *d = d_sum * c;
            }
        }
        for i in (0..self.stages.len()).rev() {
            if i != last {
                d_y = leaky_relu_backward(&trace.pre[i], &d_y, LEAK);
            }
            let d_u = self.stages[i].backward(p, &trace.inputs[i], None, &d_y, grads);
            d_y = upsample_nearest_backward(&d_u, self.config.factors[i]);
        }
        d_y
    }
}
