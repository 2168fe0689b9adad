use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grid::Grid;
use crate::nn::{NormMode, ParamStore};

fn small_config() -> AlignerConfig {
    AlignerConfig {
        channels: 8,
        blocks: 1,
        ..AlignerConfig::toy(6, 2)
    }
}

fn build(config: AlignerConfig, seed: u64) -> (Aligner, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let aligner = Aligner::new(&mut store, config, &mut rng).unwrap();
    (aligner, store)
}

fn random_sequence(rng: &mut ChaCha8Rng, true_length: usize, padded: usize, vocab: usize) -> TokenSequence {
    let inner: Vec<usize> = (0..true_length - 2).map(|_| rng.random_range(1..vocab)).collect();
    TokenSequence::wrap(&inner, 0, padded, vocab).unwrap()
}

#[test]
fn padded_values_never_reach_valid_outputs() {
    let (aligner, store) = build(AlignerConfig::toy(6, 1), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cond = Conditioning::sample(&mut rng, 0);
    let seq = random_sequence(&mut rng, 7, 12, 6);
    let mut ids = seq.ids().to_vec();
    for id in ids.iter_mut().skip(7) {
        *id = rng.random_range(0..6);
    }
    let other = TokenSequence::new(ids, 7, 6).unwrap();
    let a = aligner.encode_tokens(&store, &seq, &cond).unwrap();
    let b = aligner.encode_tokens(&store, &other, &cond).unwrap();
    assert_eq!(a, b);
    let window = OutputWindow::Span { offset: -2, length: 30 };
    let oa = aligner.align(&store, &seq, &cond, window).unwrap();
    let ob = aligner.align(&store, &other, &cond, window).unwrap();
    assert_eq!(oa, ob);
}

#[test]
fn receptive_field_spans_the_sequence() {
    let config = AlignerConfig::toy(6, 1);
    assert!(config.receptive_radius() >= 16);
    let (aligner, store) = build(config, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cond = Conditioning::sample(&mut rng, 0);
    let seq = random_sequence(&mut rng, 16, 16, 6);
    let mut ids = seq.ids().to_vec();
    ids[0] = 3;
    let changed = TokenSequence::new(ids, 16, 6).unwrap();
    let a = aligner.encode_tokens(&store, &seq, &cond).unwrap();
    let b = aligner.encode_tokens(&store, &changed, &cond).unwrap();
    assert_ne!(a.features.row(15), b.features.row(15));
}

#[test]
fn full_preset_reaches_across_long_inputs() {
    let config = AlignerConfig::full(10, 1);
    assert!(config.receptive_radius() >= 400);
    assert_eq!(config.channels, 256);
    assert_eq!(config.blocks, 10);
}

#[test]
fn fresh_model_lengths_are_finite_and_non_negative() {
    let (aligner, store) = build(AlignerConfig::toy(6, 1), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_sequence(&mut rng, 10, 16, 6);
    let cond = Conditioning::sample(&mut rng, 0);
    let lengths = aligner.predict_lengths(&store, &seq, &cond).unwrap();
    assert_eq!(lengths.len(), 16);
    assert!(lengths.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert!(lengths[10..].iter().all(|&l| l == 0.0));
}

#[test]
fn output_invariants_hold() {
    let (aligner, store) = build(AlignerConfig::toy(6, 1), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let n = rng.random_range(3..=16);
        let seq = random_sequence(&mut rng, n, 16, 6);
        let cond = Conditioning::sample(&mut rng, 0);
        let out = aligner.align(&store, &seq, &cond, OutputWindow::Full).unwrap();
        assert_eq!(out.offset, 0);
        assert_eq!(
            out.features.rows(),
            (out.predicted_total_length.ceil() as usize).max(1)
        );
        let mut acc = 0.0;
        for k in 0..16 {
            acc += out.token_lengths[k];
            assert_eq!(out.token_ends[k], acc);
            assert_eq!(out.token_centres[k], acc - out.token_lengths[k] / 2.0);
        }
        assert_eq!(out.predicted_total_length, out.token_ends[n - 1]);
        for t in 0..out.weights.rows() {
            let row = out.weights.row(t);
            let valid: f64 = row[..n].iter().sum();
            assert!((valid - 1.0).abs() <= 1e-6);
            assert!(row[n..].iter().all(|&w| w <= 1e-30));
        }
    }
}

#[test]
fn windows_match_full_alignment() {
    let (aligner, store) = build(AlignerConfig::toy(6, 1), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seq = random_sequence(&mut rng, 9, 16, 6);
    let cond = Conditioning::sample(&mut rng, 0);
    let full = aligner
        .align(&store, &seq, &cond, OutputWindow::Span { offset: 0, length: 40 })
        .unwrap();
    for (offset, length) in [(0, 10), (7, 20), (30, 10)] {
        let win = aligner
            .align(&store, &seq, &cond, OutputWindow::Span { offset, length })
            .unwrap();
        let o = offset as usize;
        assert_eq!(win.features, full.features.slice_rows(o, o + length));
        assert_eq!(win.token_lengths, full.token_lengths);
    }
}

#[test]
fn zero_lengths_clamp_the_full_window() {
    let (aligner, mut store) = build(small_config(), 11);
    // a large negative bias on the last conv drives every length to zero
    let bias = store.find("aligner/head/conv_b/bias").unwrap();
    store.get_mut(bias)[0] = -1e6;
    let seq = TokenSequence::wrap(&[1, 2], 0, 6, 6).unwrap();
    let out = aligner
        .align(&store, &seq, &Conditioning::zero(0), OutputWindow::Full)
        .unwrap();
    assert_eq!(out.predicted_total_length, 0.0);
    assert!(out.degenerate);
    assert_eq!(out.features.rows(), 1);
}

#[test]
fn bad_inputs_are_rejected() {
    let (aligner, store) = build(small_config(), 12);
    let seq = TokenSequence::wrap(&[1], 0, 4, 5).unwrap();
    assert!(aligner.align(&store, &seq, &Conditioning::zero(0), OutputWindow::Full).is_err());
    let seq = TokenSequence::wrap(&[1], 0, 4, 6).unwrap();
    assert!(aligner.align(&store, &seq, &Conditioning::zero(2), OutputWindow::Full).is_err());
    let zero = OutputWindow::Span { offset: 0, length: 0 };
    assert!(aligner.align(&store, &seq, &Conditioning::zero(0), zero).is_err());
}

#[test]
fn latent_changes_lengths() {
    let (aligner, store) = build(AlignerConfig::toy(6, 1), 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seq = random_sequence(&mut rng, 8, 16, 6);
    let a = aligner.predict_lengths(&store, &seq, &Conditioning::sample(&mut rng, 0)).unwrap();
    let b = aligner.predict_lengths(&store, &seq, &Conditioning::sample(&mut rng, 0)).unwrap();
    assert_ne!(a, b);
}

/// Random linear functional of a batch of outputs, and its cotangents.
struct Probe {
    features: Vec<Grid>,
    totals: Vec<f64>,
    lengths: Vec<Vec<f64>>,
}

impl Probe {
    fn new(rng: &mut ChaCha8Rng, outs: &[AlignerOutput]) -> Self {
        Self {
            features: outs
                .iter()
                .map(|o| Grid::from_fn(o.features.rows(), o.features.cols(), |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            totals: outs.iter().map(|_| rng.random_range(-1.0..1.0)).collect(),
            lengths: outs
                .iter()
                .map(|o| o.token_lengths.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    fn value(&self, outs: &[AlignerOutput]) -> f64 {
        outs.iter()
            .enumerate()
            .map(|(b, o)| {
                o.features.dot(&self.features[b])
                    + self.totals[b] * o.predicted_total_length
                    + o.token_lengths.iter().zip(&self.lengths[b]).map(|(a, c)| a * c).sum::<f64>()
            })
            .sum()
    }

    fn cotangents(&self) -> Vec<AlignerCotangent> {
        (0..self.features.len())
            .map(|b| AlignerCotangent {
                features: self.features[b].clone(),
                total_length: self.totals[b],
                token_lengths: Some(self.lengths[b].clone()),
            })
            .collect()
    }
}

fn check_gradients(mode: NormMode, seed: u64) {
    let config = AlignerConfig {
        norm_mode: mode,
        cond_gain: 0.5,
        ..small_config()
    };
    let (aligner, mut store) = build(config, seed);
    // lift lengths away from zero so the output ramp is active
    let bias = store.find("aligner/head/conv_b/bias").unwrap();
    store.get_mut(bias)[0] = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let seqs = vec![random_sequence(&mut rng, 5, 7, 6), random_sequence(&mut rng, 4, 6, 6)];
    let conds = vec![Conditioning::sample(&mut rng, 0), Conditioning::sample(&mut rng, 1)];
    let windows = [
        OutputWindow::Span { offset: -1, length: 9 },
        OutputWindow::Span { offset: 2, length: 5 },
    ];
    let (outs, trace) = aligner.forward(&store, &seqs, &conds, &windows, true).unwrap();
    let probe = Probe::new(&mut rng, &outs);
    let mut grads = store.zero_grads();
    let dlatent = aligner.backward(&store, &trace, &probe.cotangents(), &mut grads);

    let eval = |store: &ParamStore, conds: &[Conditioning]| {
        let (o, _) = aligner.forward(store, &seqs, conds, &windows, true).unwrap();
        probe.value(&o)
    };
    let h = 1e-6;
    let flat = store.flatten();
    let analytic = grads.flatten();
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let k = rng.random_range(0..flat.len());
        let mut v = flat.clone();
        v[k] += h;
        let mut sp = store.clone();
        sp.set_flat(&v);
        v[k] -= 2.0 * h;
        let mut sm = store.clone();
        sm.set_flat(&v);
        let fd = (eval(&sp, &conds) - eval(&sm, &conds)) / (2.0 * h);
        worst = worst.max((fd - analytic[k]).abs() / fd.abs().max(1.0));
    }
    // every embedding row used by a valid token
    let emb = store.find("aligner/embedding").unwrap();
    let emb_offset: usize = store.iter().take(emb.index()).map(|(_, t)| t.data.len()).sum();
    for k in 0..store.tensor(emb).data.len() {
        let idx = emb_offset + k;
        let mut v = flat.clone();
        v[idx] += h;
        let mut sp = store.clone();
        sp.set_flat(&v);
        v[idx] -= 2.0 * h;
        let mut sm = store.clone();
        sm.set_flat(&v);
        let fd = (eval(&sp, &conds) - eval(&sm, &conds)) / (2.0 * h);
        worst = worst.max((fd - analytic[idx]).abs() / fd.abs().max(1.0));
    }
    for b in 0..2 {
        for k in (0..LATENT_DIM).step_by(9) {
            let (mut cp, mut cm) = (conds.clone(), conds.clone());
            cp[b].latent[k] += h;
            cm[b].latent[k] -= h;
            let fd = (eval(&store, &cp) - eval(&store, &cm)) / (2.0 * h);
            worst = worst.max((fd - dlatent[b][k]).abs() / fd.abs().max(1.0));
        }
    }
    assert!(worst <= 1e-4, "{mode:?}: worst relative error {worst}");
}

#[test]
fn instance_norm_gradients_match_finite_differences() {
    check_gradients(NormMode::Instance, 20);
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    check_gradients(NormMode::Batch, 21);
}

#[test]
fn standing_statistics_make_inference_batch_independent() {
    let config = AlignerConfig {
        norm_mode: NormMode::Batch,
        ..small_config()
    };
    let (mut aligner, store) = build(config, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let batches: Vec<(Vec<TokenSequence>, Vec<Conditioning>)> = (0..3)
        .map(|_| {
            let seqs = (0..4).map(|_| random_sequence(&mut rng, 5, 8, 6)).collect();
            let conds = (0..4).map(|_| Conditioning::sample(&mut rng, 0)).collect();
            (seqs, conds)
        })
        .collect();
    aligner.collect_standing_stats(&store, &batches).unwrap();
    assert_eq!(aligner.standing.as_ref().unwrap().len(), aligner.num_norm_layers());
    let seq = random_sequence(&mut rng, 6, 8, 6);
    let cond = Conditioning::sample(&mut rng, 0);
    let other = random_sequence(&mut rng, 7, 8, 6);
    let window = OutputWindow::Span { offset: 0, length: 12 };
    let alone = aligner.align(&store, &seq, &cond, window).unwrap();
    let (paired, _) = aligner
        .forward(&store, &[seq.clone(), other], &[cond.clone(), cond.clone()], &[window, window], false)
        .unwrap();
    assert_eq!(alone.features, paired[0].features);
}
