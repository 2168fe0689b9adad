use rand::Rng;

use super::interp::{
    interpolate, interpolate_backward, positions_backward, positions_from_lengths,
};
use super::tokens::{Conditioning, TokenSequence, LATENT_DIM, SPEAKER_DIM};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::init::orthogonal;
use crate::nn::{
    relu, relu_backward, ChannelStats, CondNorm, Conv1d, Gradients, NormMode, NormTrace, ParamId,
    ParamStore,
};

/// Dilation pairs of the residual units in every block.
pub const DILATIONS: [(usize, usize); 3] = [(1, 2), (4, 8), (16, 32)];
pub const COND_DIM: usize = SPEAKER_DIM + LATENT_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerConfig {
    pub vocab_size: usize,
    pub num_speakers: usize,
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub sigma2: f64,
    pub norm_mode: NormMode,
    /// Gain of the maps from conditioning to normalisation scale and shift.
    pub cond_gain: f64,
    /// Initial bias of the length head, in aligner steps.
    pub initial_length: f64,
    /// Init gain of the last convolution in each residual unit.
    pub residual_gain: f64,
}

impl AlignerConfig {
    pub fn full(vocab_size: usize, num_speakers: usize) -> Self {
        Self {
            vocab_size,
            num_speakers,
            channels: 256,
            blocks: 10,
            kernel: 3,
            sigma2: 10.0,
            norm_mode: NormMode::Instance,
            cond_gain: 0.1,
            initial_length: 0.0,
            residual_gain: 1.0,
        }
    }

    pub fn toy(vocab_size: usize, num_speakers: usize) -> Self {
        Self {
            channels: 64,
            blocks: 2,
            ..Self::full(vocab_size, num_speakers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.num_speakers == 0 || self.channels == 0 {
            return Err(Error::Config(
                "vocabulary, speaker count and channels must be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("sigma2 {} must be positive", self.sigma2)));
        }
        if !(self.residual_gain >= 0.0 && self.residual_gain.is_finite()) {
            return Err(Error::Config(format!("residual gain {} must be finite and non-negative", self.residual_gain)));
        }
        if !(self.initial_length >= 0.0 && self.initial_length.is_finite()) {
            return Err(Error::Config(format!(
                "initial length {} must be finite and non-negative",
                self.initial_length
            )));
        }
        Ok(())
    }

    /// Positions one output can see on either side.
    pub fn receptive_radius(&self) -> usize {
        let per_block: usize = DILATIONS.iter().map(|(a, b)| a + b).sum();
        self.blocks * per_block * (self.kernel - 1) / 2
    }
}

/// Which part of the output grid to materialise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputWindow {
    /// Offset 0 through `ceil(total)` steps, at least one.
    Full,
    /// `Full` widened by `margin` steps on each side.
    Padded { margin: usize },
    Span { offset: i64, length: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerOutput {
    /// `S x D` aligned features.
    pub features: Grid,
    /// Per padded token, zero past the true length.
    pub token_lengths: Vec<f64>,
    pub token_ends: Vec<f64>,
    pub token_centres: Vec<f64>,
    /// `S x N` interpolation weights.
    pub weights: Grid,
    pub predicted_total_length: f64,
    pub offset: i64,
    /// Set when a full window had to be clamped to one step.
    pub degenerate: bool,
}

/// Encoder output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTokens {
    /// `N x D`, zero at padded positions.
    pub features: Grid,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Unit {
    norm_a: CondNorm,
    conv_a: Conv1d,
    norm_b: CondNorm,
    conv_b: Conv1d,
}

#[derive(Clone, Debug)]
struct LengthHead {
    norm_a: CondNorm,
    conv_a: Conv1d,
    norm_b: CondNorm,
    conv_b: Conv1d,
}

/// Cotangents of one [`AlignerOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct AlignerCotangent {
    pub features: Grid,
    pub total_length: f64,
    pub token_lengths: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct UnitTrace {
    input: Vec<Grid>,
    norm_a: NormTrace,
    pre_a: Vec<Grid>,
    mid: Vec<Grid>,
    norm_b: NormTrace,
    pre_b: Vec<Grid>,
}

/// Everything the backward pass needs from a batched forward pass.
#[derive(Clone, Debug)]
pub struct AlignerTrace {
    ids: Vec<Vec<usize>>,
    true_lengths: Vec<usize>,
    speakers: Vec<usize>,
    conds: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
    units: Vec<UnitTrace>,
    encoded: Vec<Grid>,
    head_norm_a: NormTrace,
    head_pre_a: Vec<Grid>,
    head_mid: Vec<Grid>,
    head_norm_b: NormTrace,
    head_pre_b: Vec<Grid>,
    raw_lengths: Vec<Vec<f64>>,
    centres: Vec<Vec<f64>>,
    offsets: Vec<i64>,
    weights: Vec<Grid>,
}

impl AlignerTrace {
    /// Inputs of every normalisation layer, in layer order.
    fn norm_inputs(&self) -> Vec<&Vec<Grid>> {
        let mut out = Vec::new();
        for u in &self.units {
            out.push(&u.input);
            out.push(&u.mid);
        }
        out.push(&self.encoded);
        out.push(&self.head_mid);
        out
    }
}

/// Token encoder, length predictor and interpolating aligner.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub config: AlignerConfig,
    pub embedding: ParamId,
    pub speakers: ParamId,
    units: Vec<Unit>,
    head: LengthHead,
    /// Frozen statistics for batch normalisation at inference.
    pub standing: Option<Vec<ChannelStats>>,
}

fn mask_rows(x: &mut Grid, mask: &[bool]) {
    for (t, &m) in mask.iter().enumerate() {
        if !m {
            x.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Aligner {
    pub fn new(store: &mut ParamStore, config: AlignerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let g = config.cond_gain;
        let embedding = store.add(
            "aligner/embedding",
            &[config.vocab_size, c],
            orthogonal(config.vocab_size, c, 1.0, rng),
        );
        let speakers = store.add(
            "aligner/speakers",
            &[config.num_speakers, SPEAKER_DIM],
            orthogonal(config.num_speakers, SPEAKER_DIM, 1.0, rng),
        );
        let mut units = Vec::new();
        for b in 0..config.blocks {
            for (u, &(da, db)) in DILATIONS.iter().enumerate() {
                let name = format!("aligner/block{b}/unit{u}");
                units.push(Unit {
                    norm_a: CondNorm::new(store, &format!("{name}/norm_a"), c, COND_DIM, g, rng),
                    conv_a: Conv1d::new(
                        store,
                        &format!("{name}/conv_a"),
                        c,
                        c,
                        config.kernel,
                        da,
                        1.0,
                        rng,
                    ),
                    norm_b: CondNorm::new(store, &format!("{name}/norm_b"), c, COND_DIM, g, rng),
                    conv_b: Conv1d::new(
                        store,
                        &format!("{name}/conv_b"),
                        c,
                        c,
                        config.kernel,
                        db,
                        config.residual_gain,
                        rng,
                    ),
                });
            }
        }
        let head = LengthHead {
            norm_a: CondNorm::new(store, "aligner/head/norm_a", c, COND_DIM, g, rng),
            conv_a: Conv1d::new(store, "aligner/head/conv_a", c, c, 1, 1, 1.0, rng),
            norm_b: CondNorm::new(store, "aligner/head/norm_b", c, COND_DIM, g, rng),
            conv_b: Conv1d::new(store, "aligner/head/conv_b", c, 1, 1, 1, 1.0, rng),
        };
        store.get_mut(head.conv_b.bias).fill(config.initial_length);
        Ok(Self {
            config,
            embedding,
            speakers,
            units,
            head,
            standing: None,
        })
    }

    pub fn num_norm_layers(&self) -> usize {
        2 * self.units.len() + 2
    }

    fn check_inputs(&self, seq: &TokenSequence, cond: &Conditioning) -> Result<()> {
        if seq.vocab_size() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "sequence vocabulary {} does not match aligner vocabulary {}",
                seq.vocab_size(),
                self.config.vocab_size
            )));
        }
        if cond.speaker >= self.config.num_speakers {
            return Err(Error::Config(format!(
                "speaker {} out of range for {} speakers",
                cond.speaker, self.config.num_speakers
            )));
        }
        Conditioning::new(cond.latent.clone(), cond.speaker).map(|_| ())
    }

    /// Speaker embedding followed by the latent.
    pub fn condition_vector(&self, p: &ParamStore, cond: &Conditioning) -> Vec<f64> {
        let table = p.get(self.speakers);
        let mut v = table[cond.speaker * SPEAKER_DIM..(cond.speaker + 1) * SPEAKER_DIM].to_vec();
        v.extend_from_slice(&cond.latent);
        v
    }

    fn norm(
        &self,
        p: &ParamStore,
        layer: &CondNorm,
        index: usize,
        xs: &[Grid],
        masks: &[&[bool]],
        conds: &[Vec<f64>],
        training: bool,
    ) -> (Vec<Grid>, NormTrace) {
        let standing = match (self.config.norm_mode, training, &self.standing) {
            (NormMode::Batch, false, Some(s)) => Some(&s[index]),
            _ => None,
        };
        layer.forward(p, xs, masks, conds, self.config.norm_mode, standing)
    }

    /// Runs the whole aligner over a batch. `training` selects batch
    /// statistics over standing ones when the norm mode is batch.
    pub fn forward(
        &self,
        p: &ParamStore,
        seqs: &[TokenSequence],
        conds: &[Conditioning],
        windows: &[OutputWindow],
        training: bool,
    ) -> Result<(Vec<AlignerOutput>, AlignerTrace)> {
        if seqs.len() != conds.len() || seqs.len() != windows.len() || seqs.is_empty() {
            return Err(Error::Shape(format!(
                "batch of {} sequences, {} conditionings, {} windows",
                seqs.len(),
                conds.len(),
                windows.len()
            )));
        }
        for (s, c) in seqs.iter().zip(conds) {
            self.check_inputs(s, c)?;
        }
        let ch = self.config.channels;
        let cvecs: Vec<Vec<f64>> = conds.iter().map(|c| self.condition_vector(p, c)).collect();
        let masks: Vec<Vec<bool>> = seqs.iter().map(TokenSequence::mask).collect();
        let mrefs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();

        let table = p.get(self.embedding);
        let mut x: Vec<Grid> = seqs
            .iter()
            .map(|s| {
                let mut g = Grid::zeros(s.padded_length(), ch);
                for (t, &id) in s.valid_ids().iter().enumerate() {
                    g.row_mut(t).copy_from_slice(&table[id * ch..(id + 1) * ch]);
                }
                g
            })
            .collect();

        let mut units = Vec::with_capacity(self.units.len());
        let mut layer = 0;
        for unit in &self.units {
            let (pre_a, norm_a) = self.norm(p, &unit.norm_a, layer, &x, &mrefs, &cvecs, training);
            let mid: Vec<Grid> = pre_a
                .iter()
                .zip(&mrefs)
                .map(|(u, m)| unit.conv_a.forward(p, &relu(u), Some(m)))
                .collect();
            let (pre_b, norm_b) =
                self.norm(p, &unit.norm_b, layer + 1, &mid, &mrefs, &cvecs, training);
            layer += 2;
            let next: Vec<Grid> = pre_b
                .iter()
                .zip(&mrefs)
                .zip(&x)
                .map(|((u, m), res)| {
                    let mut y = unit.conv_b.forward(p, &relu(u), Some(m));
                    y.add_assign(res);
                    y
                })
                .collect();
            units.push(UnitTrace {
                input: std::mem::replace(&mut x, next),
                norm_a,
                pre_a,
                mid,
                norm_b,
                pre_b,
            });
        }
        for (g, m) in x.iter_mut().zip(&mrefs) {
            mask_rows(g, m);
        }
        let encoded = x;

        let head = &self.head;
        let (head_pre_a, head_norm_a) =
            self.norm(p, &head.norm_a, layer, &encoded, &mrefs, &cvecs, training);
        let head_mid: Vec<Grid> = head_pre_a
            .iter()
            .zip(&mrefs)
            .map(|(u, m)| head.conv_a.forward(p, &relu(u), Some(m)))
            .collect();
        let (head_pre_b, head_norm_b) =
            self.norm(p, &head.norm_b, layer + 1, &head_mid, &mrefs, &cvecs, training);
        let raw_lengths: Vec<Vec<f64>> = head_pre_b
            .iter()
            .zip(&mrefs)
            .map(|(u, m)| head.conv_b.forward(p, &relu(u), Some(m)).into_vec())
            .collect();

        let mut outputs = Vec::with_capacity(seqs.len());
        let mut centres = Vec::with_capacity(seqs.len());
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut weights = Vec::with_capacity(seqs.len());
        for b in 0..seqs.len() {
            let lengths: Vec<f64> = raw_lengths[b]
                .iter()
                .zip(&masks[b])
                .map(|(&r, &m)| if m { r.max(0.0) } else { 0.0 })
                .collect();
            let pos = positions_from_lengths(&lengths, seqs[b].true_length());
            let (offset, length, degenerate) = match windows[b] {
                OutputWindow::Full | OutputWindow::Padded { .. } => {
                    let margin = match windows[b] {
                        OutputWindow::Padded { margin } => margin,
                        _ => 0,
                    };
                    let s = pos.total.ceil();
                    (
                        -(margin as i64),
                        (s as usize).max(1) + 2 * margin,
                        s < 1.0,
                    )
                }
                OutputWindow::Span { offset, length } => {
                    if length == 0 {
                        return Err(Error::Config("output window of zero steps".into()));
                    }
                    (offset, length, false)
                }
            };
            let interp = interpolate(
                &encoded[b],
                &pos.centres,
                &masks[b],
                offset,
                length,
                self.config.sigma2,
            );
            centres.push(pos.centres.clone());
            offsets.push(offset);
            weights.push(interp.weights.clone());
            outputs.push(AlignerOutput {
                features: interp.features,
                token_lengths: lengths,
                token_ends: pos.ends,
                token_centres: pos.centres,
                weights: interp.weights,
                predicted_total_length: pos.total,
                offset,
                degenerate,
            });
        }

        let trace = AlignerTrace {
            ids: seqs.iter().map(|s| s.ids().to_vec()).collect(),
            true_lengths: seqs.iter().map(TokenSequence::true_length).collect(),
            speakers: conds.iter().map(|c| c.speaker).collect(),
            conds: cvecs,
            masks,
            units,
            encoded,
            head_norm_a,
            head_pre_a,
            head_mid,
            head_norm_b,
            head_pre_b,
            raw_lengths,
            centres,
            offsets,
            weights,
        };
        Ok((outputs, trace))
    }

    /// Accumulates parameter gradients and returns latent cotangents.
    pub fn backward(
        &self,
        p: &ParamStore,
        trace: &AlignerTrace,
        cots: &[AlignerCotangent],
        grads: &mut Gradients,
    ) -> Vec<Vec<f64>> {
        let batch = cots.len();
        assert_eq!(batch, trace.masks.len());
        let ch = self.config.channels;
        let mrefs: Vec<&[bool]> = trace.masks.iter().map(Vec::as_slice).collect();
        let mut dconds = vec![vec![0.0; COND_DIM]; batch];
        let add_conds = |dconds: &mut Vec<Vec<f64>>, extra: Vec<Vec<f64>>| {
            for (a, e) in dconds.iter_mut().zip(extra) {
                a.iter_mut().zip(e).for_each(|(x, y)| *x += y);
            }
        };

        let mut d_encoded = Vec::with_capacity(batch);
        let mut d_raw = Vec::with_capacity(batch);
        for b in 0..batch {
            let (dh, dc) = interpolate_backward(
                &trace.encoded[b],
                &trace.centres[b],
                trace.offsets[b],
                self.config.sigma2,
                &trace.weights[b],
                &cots[b].features,
            );
            let mut dl = positions_backward(&dc, None, cots[b].total_length, trace.true_lengths[b]);
            if let Some(extra) = &cots[b].token_lengths {
                dl.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
            }
            let raw = &trace.raw_lengths[b];
            let dr: Vec<f64> = dl
                .iter()
                .zip(raw)
                .zip(&trace.masks[b])
                .map(|((&g, &r), &m)| if m && r > 0.0 { g } else { 0.0 })
                .collect();
            d_encoded.push(dh);
            d_raw.push(Grid::from_vec(dr.len(), 1, dr).expect("column"));
        }

        let head = &self.head;
        let d_pre_b: Vec<Grid> = (0..batch)
            .map(|b| {
                let u = &trace.head_pre_b[b];
                let dv = head.conv_b.backward(p, &relu(u), Some(mrefs[b]), &d_raw[b], grads);
                relu_backward(u, &dv)
            })
            .collect();
        let (d_mid, dc) =
            head.norm_b
                .backward(p, &trace.head_norm_b, &mrefs, &trace.conds, &d_pre_b, grads);
        add_conds(&mut dconds, dc);
        let d_pre_a: Vec<Grid> = (0..batch)
            .map(|b| {
                let u = &trace.head_pre_a[b];
                let dv = head.conv_a.backward(p, &relu(u), Some(mrefs[b]), &d_mid[b], grads);
                relu_backward(u, &dv)
            })
            .collect();
        let (d_enc_head, dc) =
            head.norm_a
                .backward(p, &trace.head_norm_a, &mrefs, &trace.conds, &d_pre_a, grads);
        add_conds(&mut dconds, dc);
        let mut dx: Vec<Grid> = d_encoded
            .into_iter()
            .zip(d_enc_head)
            .zip(&mrefs)
            .map(|((mut a, h), m)| {
                a.add_assign(&h);
                mask_rows(&mut a, m);
                a
            })
            .collect();

        for (unit, ut) in self.units.iter().zip(&trace.units).rev() {
            let d_pre_b: Vec<Grid> = (0..batch)
                .map(|b| {
                    let u = &ut.pre_b[b];
                    let dv = unit.conv_b.backward(p, &relu(u), Some(mrefs[b]), &dx[b], grads);
                    relu_backward(u, &dv)
                })
                .collect();
            let (d_mid, dc) =
                unit.norm_b
                    .backward(p, &ut.norm_b, &mrefs, &trace.conds, &d_pre_b, grads);
            add_conds(&mut dconds, dc);
            let d_pre_a: Vec<Grid> = (0..batch)
                .map(|b| {
                    let u = &ut.pre_a[b];
                    let dv = unit.conv_a.backward(p, &relu(u), Some(mrefs[b]), &d_mid[b], grads);
                    relu_backward(u, &dv)
                })
                .collect();
            let (d_in, dc) =
                unit.norm_a
                    .backward(p, &ut.norm_a, &mrefs, &trace.conds, &d_pre_a, grads);
            add_conds(&mut dconds, dc);
            for (acc, d) in dx.iter_mut().zip(d_in) {
                acc.add_assign(&d);
            }
        }

        {
            let demb = grads.get_mut(self.embedding);
            for b in 0..batch {
                for t in 0..trace.true_lengths[b] {
                    let id = trace.ids[b][t];
                    for (a, g) in demb[id * ch..(id + 1) * ch].iter_mut().zip(dx[b].row(t)) {
                        *a += g;
                    }
                }
            }
        }
        let dspk = grads.get_mut(self.speakers);
        let mut dlatent = Vec::with_capacity(batch);
        for (b, dc) in dconds.into_iter().enumerate() {
            let s = trace.speakers[b];
            for (a, g) in dspk[s * SPEAKER_DIM..(s + 1) * SPEAKER_DIM]
                .iter_mut()
                .zip(&dc[..SPEAKER_DIM])
            {
                *a += g;
            }
            dlatent.push(dc[SPEAKER_DIM..].to_vec());
        }
        dlatent
    }

    pub fn align(
        &self,
        p: &ParamStore,
        seq: &TokenSequence,
        cond: &Conditioning,
        window: OutputWindow,
    ) -> Result<AlignerOutput> {
        let (mut out, _) = self.forward(
            p,
            std::slice::from_ref(seq),
            std::slice::from_ref(cond),
            &[window],
            false,
        )?;
        Ok(out.pop().expect("one output"))
    }

    pub fn encode_tokens(
        &self,
        p: &ParamStore,
        seq: &TokenSequence,
        cond: &Conditioning,
    ) -> Result<EncodedTokens> {
        let (_, mut trace) = self.forward(
            p,
            std::slice::from_ref(seq),
            std::slice::from_ref(cond),
            &[OutputWindow::Span {
                offset: 0,
                length: 1,
            }],
            false,
        )?;
        Ok(EncodedTokens {
            features: trace.encoded.pop().expect("one sequence"),
            mask: seq.mask(),
        })
    }

    pub fn predict_lengths(
        &self,
        p: &ParamStore,
        seq: &TokenSequence,
        cond: &Conditioning,
    ) -> Result<Vec<f64>> {
        Ok(self
            .align(p, seq, cond, OutputWindow::Span { offset: 0, length: 1 })?
            .token_lengths)
    }

    /// Pools batch statistics of every normalisation layer over `batches`
    /// and freezes them for inference.
    pub fn collect_standing_stats(
        &mut self,
        p: &ParamStore,
        batches: &[(Vec<TokenSequence>, Vec<Conditioning>)],
    ) -> Result<()> {
        let layers = self.num_norm_layers();
        let mut inputs: Vec<Vec<Grid>> = vec![Vec::new(); layers];
        let mut masks: Vec<Vec<bool>> = Vec::new();
        let saved = self.standing.take();
        for (seqs, conds) in batches {
            let windows = vec![OutputWindow::Span { offset: 0, length: 1 }; seqs.len()];
            let result = self.forward(p, seqs, conds, &windows, true);
            let trace = match result {
                Ok((_, t)) => t,
                Err(e) => {
                    self.standing = saved;
                    return Err(e);
                }
            };
            for (slot, xs) in inputs.iter_mut().zip(trace.norm_inputs()) {
                slot.extend(xs.iter().cloned());
            }
            masks.extend(trace.masks.iter().cloned());
        }
        if masks.is_empty() {
            self.standing = saved;
            return Err(Error::Empty("standing statistics batches"));
        }
        let mrefs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
        self.standing = Some(
            inputs
                .iter()
                .map(|xs| {
                    let refs: Vec<&Grid> = xs.iter().collect();
                    CondNorm::statistics(&refs, &mrefs)
                })
                .collect(),
        );
        Ok(())
    }
}
