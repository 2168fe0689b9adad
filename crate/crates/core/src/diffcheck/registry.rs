//! The operations covered by the gradient suite.

use rand::Rng;

use super::{saved_as, DifferentiableOp, Saved};
use crate::aligner::{
    interpolate, interpolate_backward, positions_backward, positions_from_lengths, Aligner, AlignerConfig,
    AlignerCotangent, Conditioning, OutputWindow, TokenSequence, LATENT_DIM,
};
use crate::error::Result;
use crate::grid::Grid;
use crate::losses::{l1_spectrogram_loss, length_loss, ConvScorer, Scorer};
use crate::nn::ParamStore;
use crate::rng::substream;
use crate::signal::{MelFrontend, MelParams, MelTrace};
use crate::softdtw::{soft_dtw, DtwConfig};
use crate::toytts::{DecoderConfig, ToyDecoder};

/// Distance kept between sampled inputs and the kinks of `|x|`.
const KINK_MARGIN: f64 = 1e-3;

/// Uniform draw in `(-scale, scale)` at least `KINK_MARGIN` from zero.
fn away_from_zero(rng: &mut impl Rng, scale: f64) -> f64 {
    loop {
        let v = rng.random_range(-scale..scale);
        if v.abs() > KINK_MARGIN {
            return v;
        }
    }
}

fn random_grid(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Grid {
    Grid::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Wraps an op and multiplies its gradient by `factor`, for fault injection.
pub struct Scaled<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: DifferentiableOp> DifferentiableOp for Scaled<O> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        self.inner.sample_inputs(seed)
    }

    fn forward(&self, inputs: &[f64]) -> Result<(Vec<f64>, Saved)> {
        self.inner.forward(inputs)
    }

    fn backward(&self, inputs: &[f64], saved: &Saved, d_out: &[f64]) -> Vec<f64> {
        let mut g = self.inner.backward(inputs, saved, d_out);
        g.iter_mut().for_each(|v| *v *= self.factor);
        g
    }
}

/// Parameter coordinates exposed to the check, beside the op's own inputs.
struct ParamProbe {
    store: ParamStore,
    picks: Vec<usize>,
}

impl ParamProbe {
    fn new(store: ParamStore, count: usize, seed: u64) -> Self {
        let total = store.num_scalars();
        let mut rng = substream(seed, 0x9a);
        let picks = rand::seq::index::sample(&mut rng, total, count.min(total)).into_vec();
        Self { store, picks }
    }

    fn values(&self) -> Vec<f64> {
        let flat = self.store.flatten();
        self.picks.iter().map(|&i| flat[i]).collect()
    }

    fn with(&self, values: &[f64]) -> ParamStore {
        let mut flat = self.store.flatten();
        for (&i, &v) in self.picks.iter().zip(values) {
            flat[i] = v;
        }
        let mut s = self.store.clone();
        s.set_flat(&flat);
        s
    }

    fn gather(&self, grads: &[f64]) -> Vec<f64> {
        self.picks.iter().map(|&i| grads[i]).collect()
    }
}

struct MelOp {
    frontend: MelFrontend,
    samples: usize,
}

impl DifferentiableOp for MelOp {
    fn name(&self) -> &str {
        "mel_spectrogram"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, 1);
        (0..self.samples).map(|_| away_from_zero(&mut rng, 0.9)).collect()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let (mel, trace) = self.frontend.forward(x, true, 0)?;
        Ok((mel.values.into_vec(), Box::new(trace)))
    }

    fn backward(&self, _: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let trace: &MelTrace = saved_as(saved);
        let rows = d.len() / self.frontend.params().num_bins;
        let g = Grid::from_vec(rows, self.frontend.params().num_bins, d.to_vec()).expect("cotangent shape");
        self.frontend.backward(trace, &g)
    }
}

/// Features and centres in, interpolated window out.
struct InterpolateOp {
    tokens: usize,
    channels: usize,
    mask: Vec<bool>,
    offset: i64,
    length: usize,
    sigma2: f64,
}

impl InterpolateOp {
    fn split(&self, x: &[f64]) -> (Grid, Vec<f64>) {
        let n = self.tokens * self.channels;
        let f = Grid::from_vec(self.tokens, self.channels, x[..n].to_vec()).expect("feature shape");
        (f, x[n..].to_vec())
    }
}

impl DifferentiableOp for InterpolateOp {
    fn name(&self) -> &str {
        "interpolate"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, 2);
        let mut x: Vec<f64> = (0..self.tokens * self.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = 0.0;
        for _ in 0..self.tokens {
            c += rng.random_range(0.5..2.5);
            x.push(c);
        }
        x
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let (f, c) = self.split(x);
        let out = interpolate(&f, &c, &self.mask, self.offset, self.length, self.sigma2);
        Ok((out.features.into_vec(), Box::new(out.weights)))
    }

    fn backward(&self, x: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let (f, c) = self.split(x);
        let weights: &Grid = saved_as(saved);
        let d_out = Grid::from_vec(self.length, self.channels, d.to_vec()).expect("cotangent shape");
        let (df, dc) = interpolate_backward(&f, &c, self.offset, self.sigma2, weights, &d_out);
        let mut g = df.into_vec();
        g.extend(dc);
        g
    }
}

/// Token lengths in; ends, centres and total out.
struct PositionsOp {
    tokens: usize,
    true_length: usize,
}

impl DifferentiableOp for PositionsOp {
    fn name(&self) -> &str {
        "positions_from_lengths"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, 3);
        (0..self.tokens)
            .map(|i| if i < self.true_length { rng.random_range(0.5..8.0) } else { 0.0 })
            .collect()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let p = positions_from_lengths(x, self.true_length);
        let mut out = p.ends;
        out.extend(p.centres);
        out.push(p.total);
        Ok((out, Box::new(())))
    }

    fn backward(&self, _: &[f64], _: &Saved, d: &[f64]) -> Vec<f64> {
        let n = self.tokens;
        positions_backward(&d[n..2 * n], Some(&d[..n]), d[2 * n], self.true_length)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AlignerOutputKind {
    Lengths,
    Features,
}

/// A small aligner, differentiated with respect to the latent vector and a
/// sample of its parameters.
struct AlignerOp {
    name: &'static str,
    kind: AlignerOutputKind,
    aligner: Aligner,
    params: ParamProbe,
    seq: TokenSequence,
    speaker: usize,
    window: OutputWindow,
}

impl AlignerOp {
    fn new(name: &'static str, kind: AlignerOutputKind) -> Self {
        let config = AlignerConfig {
            channels: 8,
            blocks: 1,
            sigma2: 2.0,
            // keeps every length on the linear side of the output ramp
            initial_length: 3.0,
            ..AlignerConfig::toy(5, 2)
        };
        let mut store = ParamStore::new();
        let aligner = Aligner::new(&mut store, config, &mut substream(11, 0)).expect("valid config");
        let seq = TokenSequence::new(vec![0, 3, 1, 4, 0, 0], 5, 5).expect("valid tokens");
        Self {
            name,
            kind,
            aligner,
            params: ParamProbe::new(store, 48, 12),
            seq,
            speaker: 1,
            window: OutputWindow::Span { offset: -1, length: 12 },
        }
    }

    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x.split_at(LATENT_DIM)
    }
}

impl DifferentiableOp for AlignerOp {
    fn name(&self) -> &str {
        self.name
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut x = crate::rng::gaussian_vec(&mut substream(seed, 4), LATENT_DIM);
        x.extend(self.params.values());
        x
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let (z, pv) = self.split(x);
        let store = self.params.with(pv);
        let cond = Conditioning::new(z.to_vec(), self.speaker)?;
        let (outs, trace) = self.aligner.forward(
            &store,
            std::slice::from_ref(&self.seq),
            std::slice::from_ref(&cond),
            &[self.window],
            false,
        )?;
        let out = &outs[0];
        let y = match self.kind {
            AlignerOutputKind::Lengths => out.token_lengths.clone(),
            AlignerOutputKind::Features => {
                let mut y = out.features.as_slice().to_vec();
                y.push(out.predicted_total_length);
                y
            }
        };
        let shape = out.features.shape();
        Ok((y, Box::new((store, trace, shape))))
    }

    fn backward(&self, _: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let (store, trace, (rows, cols)) = saved_as::<(ParamStore, crate::aligner::AlignerTrace, (usize, usize))>(saved);
        let cot = match self.kind {
            AlignerOutputKind::Lengths => AlignerCotangent {
                features: Grid::zeros(*rows, *cols),
                total_length: 0.0,
                token_lengths: Some(d.to_vec()),
            },
            AlignerOutputKind::Features => AlignerCotangent {
                features: Grid::from_vec(*rows, *cols, d[..rows * cols].to_vec()).expect("cotangent shape"),
                total_length: d[rows * cols],
                token_lengths: None,
            },
        };
        let mut grads = store.zero_grads();
        let dz = self.aligner.backward(store, trace, &[cot], &mut grads);
        let mut g = dz.into_iter().next().expect("one latent gradient");
        g.extend(self.params.gather(&grads.flatten()));
        g
    }
}

struct SoftDtwOp {
    target: Grid,
    config: DtwConfig,
}

impl SoftDtwOp {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            target: random_grid(&mut substream(5, 0), rows, cols, 1.0),
            config: DtwConfig::default(),
        }
    }
}

impl DifferentiableOp for SoftDtwOp {
    fn name(&self) -> &str {
        "soft_dtw"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let (rows, cols) = self.target.shape();
        let mut rng = substream(seed, 6);
        // every value keeps clear of the target values in its column, where
        // the frame costs have corners
        (0..rows * cols)
            .map(|k| loop {
                let v = rng.random_range(-1.0..1.0);
                if (0..rows).all(|r| (v - self.target.row(r)[k % cols]).abs() > KINK_MARGIN) {
                    return v;
                }
            })
            .collect()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let (rows, cols) = self.target.shape();
        let gen = Grid::from_vec(rows, cols, x.to_vec())?;
        let r = soft_dtw(&gen, &self.target, &self.config)?;
        Ok((vec![r.value], Box::new(r.grad_gen)))
    }

    fn backward(&self, _: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let g: &Grid = saved_as(saved);
        g.as_slice().iter().map(|v| v * d[0]).collect()
    }
}

struct L1Op {
    target: Grid,
}

impl DifferentiableOp for L1Op {
    fn name(&self) -> &str {
        "l1_spectrogram_loss"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, 8);
        self.target
            .as_slice()
            .iter()
            .map(|&t| t + away_from_zero(&mut rng, 1.0))
            .collect()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let (rows, cols) = self.target.shape();
        let gen = Grid::from_vec(rows, cols, x.to_vec())?;
        let (v, g) = l1_spectrogram_loss(&gen, &self.target)?;
        Ok((vec![v], Box::new(g)))
    }

    fn backward(&self, _: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let g: &Grid = saved_as(saved);
        g.as_slice().iter().map(|v| v * d[0]).collect()
    }
}

struct LengthLossOp {
    tokens: usize,
    target: f64,
}

impl DifferentiableOp for LengthLossOp {
    fn name(&self) -> &str {
        "length_loss"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, 9);
        (0..self.tokens).map(|_| rng.random_range(0.0..6.0)).collect()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let (v, g) = length_loss(x, self.target);
        Ok((vec![v], Box::new(g)))
    }

    fn backward(&self, _: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let g: &Vec<f64> = saved_as(saved);
        g.iter().map(|v| v * d[0]).collect()
    }
}

/// The toy decoder with respect to its input features and some parameters.
struct DecoderOp {
    decoder: ToyDecoder,
    params: ParamProbe,
    steps: usize,
    start: i64,
}

impl DecoderOp {
    fn new() -> Self {
        let mut store = ParamStore::new();
        let config = DecoderConfig::toy(6, vec![300.0, 700.0, 1100.0], 4800.0);
        let decoder = ToyDecoder::new(&mut store, config, 120, &mut substream(13, 0)).expect("valid config");
        Self {
            decoder,
            params: ParamProbe::new(store, 48, 14),
            steps: 3,
            start: 2,
        }
    }

    fn rows(&self) -> usize {
        self.steps + 2 * crate::toytts::MARGIN
    }
}

impl DifferentiableOp for DecoderOp {
    fn name(&self) -> &str {
        "toy_decoder"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut x = random_grid(&mut substream(seed, 10), self.rows(), 6, 1.0).into_vec();
        x.extend(self.params.values());
        x
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let n = self.rows() * 6;
        let store = self.params.with(&x[n..]);
        let f = Grid::from_vec(self.rows(), 6, x[..n].to_vec())?;
        let (y, trace) = self.decoder.forward(&store, &f, self.start)?;
        Ok((y, Box::new((store, trace))))
    }

    fn backward(&self, _: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let (store, trace) = saved_as::<(ParamStore, crate::toytts::decoder::DecoderTrace)>(saved);
        let mut grads = store.zero_grads();
        let mut g = self.decoder.backward(store, trace, d, &mut grads).into_vec();
        g.extend(self.params.gather(&grads.flatten()));
        g
    }
}

/// One random window discriminator with respect to its window and some
/// parameters.
struct ScorerOp {
    scorer: ConvScorer,
    params: ParamProbe,
}

impl ScorerOp {
    fn new() -> Self {
        let mut store = ParamStore::new();
        let scorer = ConvScorer::new(&mut store, "rwd", 96, 24, 8, &mut substream(15, 0)).expect("valid config");
        Self {
            scorer,
            params: ParamProbe::new(store, 48, 16),
        }
    }
}

impl DifferentiableOp for ScorerOp {
    fn name(&self) -> &str {
        "window_scorer"
    }

    fn sample_inputs(&self, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, 17);
        let mut x: Vec<f64> = (0..self.scorer.window_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        x.extend(self.params.values());
        x
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Saved)> {
        let n = self.scorer.window_len;
        let store = self.params.with(&x[n..]);
        let s = self.scorer.score(&store, &x[..n])?;
        Ok((vec![s], Box::new(store)))
    }

    fn backward(&self, x: &[f64], saved: &Saved, d: &[f64]) -> Vec<f64> {
        let store: &ParamStore = saved_as(saved);
        let n = self.scorer.window_len;
        let mut grads = store.zero_grads();
        let mut g = self
            .scorer
            .backward(store, &x[..n], d[0], &mut grads)
            .expect("window length checked in forward");
        g.extend(self.params.gather(&grads.flatten()));
        g
    }
}

/// Every differentiable operation of the crate, at check-friendly sizes.
pub fn registry() -> Vec<Box<dyn DifferentiableOp>> {
    let mel = MelParams {
        frame_length: 64,
        frame_step: 32,
        fft_length: 64,
        num_bins: 6,
        max_jitter: 0,
        ..MelParams::toy()
    };
    vec![
        Box::new(MelOp {
            frontend: MelFrontend::new(mel).expect("valid mel params"),
            samples: 150,
        }),
        Box::new(InterpolateOp {
            tokens: 5,
            channels: 3,
            mask: vec![true, true, true, true, false],
            offset: -1,
            length: 10,
            sigma2: 1.5,
        }),
        Box::new(PositionsOp {
            tokens: 6,
            true_length: 4,
        }),
        Box::new(AlignerOp::new("predict_lengths", AlignerOutputKind::Lengths)),
        Box::new(AlignerOp::new("aligner_features", AlignerOutputKind::Features)),
        Box::new(SoftDtwOp::new(4, 3)),
        Box::new(L1Op {
            target: random_grid(&mut substream(7, 0), 4, 5, 3.0),
        }),
        Box::new(LengthLossOp {
            tokens: 6,
            target: 20.0,
        }),
        Box::new(DecoderOp::new()),
        Box::new(ScorerOp::new()),
    ]
}
