//! Conditional normalisation over the valid positions of masked sequences.
//!
//! Each channel is standardised, then modulated by a scale `1 + gamma(c)`
//! and shift `beta(c)` computed from the conditioning vector `c` by learned
//! linear maps. Statistics come either from each example's own valid
//! positions ([`NormMode::Instance`]), from all valid positions in the batch
//! ([`NormMode::Batch`]), or from frozen standing statistics.
//! Masked-out positions produce zeros.

use rand::Rng;

use super::layers::Linear;
use super::params::{Gradients, ParamStore};
use crate::grid::Grid;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormMode {
    /// Per-example statistics; deterministic for single-example inference.
    #[default]
    Instance,
    /// Statistics pooled over the whole batch.
    Batch,
}

/// Frozen per-channel mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CondNorm {
    pub channels: usize,
    pub scale: Linear,
    pub shift: Linear,
}

#[derive(Clone, Debug)]
pub struct NormTrace {
    xhat: Vec<Grid>,
    /// Per example: `1 + gamma`.
    scales: Vec<Vec<f64>>,
    /// Example indices of each statistics group.
    groups: Vec<Vec<usize>>,
    /// Per group: `1 / sqrt(var + eps)`.
    inv_std: Vec<Vec<f64>>,
    frozen: bool,
}

impl CondNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_dim: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            channels,
            scale: Linear::new(store, &format!("{name}/scale"), cond_dim, channels, gain, rng),
            shift: Linear::new(store, &format!("{name}/shift"), cond_dim, channels, gain, rng),
        }
    }

    /// Channel statistics of the valid positions of `xs`.
    pub fn statistics(xs: &[&Grid], masks: &[&[bool]]) -> ChannelStats {
        let channels = xs[0].cols();
        let mut mean = vec![0.0; channels];
        let mut count = 0usize;
        for (x, mask) in xs.iter().zip(masks) {
            for t in (0..x.rows()).filter(|&t| mask[t]) {
                count += 1;
                for (m, v) in mean.iter_mut().zip(x.row(t)) {
                    *m += v;
                }
            }
        }
        let n = count.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for (x, mask) in xs.iter().zip(masks) {
            for t in (0..x.rows()).filter(|&t| mask[t]) {
                for ((s, v), m) in var.iter_mut().zip(x.row(t)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        ChannelStats { mean, var }
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        xs: &[Grid],
        masks: &[&[bool]],
        conds: &[Vec<f64>],
        mode: NormMode,
        standing: Option<&ChannelStats>,
    ) -> (Vec<Grid>, NormTrace) {
        let batch = xs.len();
        let groups: Vec<Vec<usize>> = match (standing, mode) {
            (Some(_), _) | (None, NormMode::Batch) => vec![(0..batch).collect()],
            (None, NormMode::Instance) => (0..batch).map(|b| vec![b]).collect(),
        };
        let stats: Vec<ChannelStats> = match standing {
            Some(s) => vec![s.clone()],
            None => groups
                .iter()
                .map(|g| {
                    let gx: Vec<&Grid> = g.iter().map(|&b| &xs[b]).collect();
                    let gm: Vec<&[bool]> = g.iter().map(|&b| masks[b]).collect();
                    Self::statistics(&gx, &gm)
                })
                .collect(),
        };
        let inv_std: Vec<Vec<f64>> = stats
            .iter()
            .map(|s| s.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect())
            .collect();
        let mut group_of = vec![0; batch];
        for (gi, g) in groups.iter().enumerate() {
            for &b in g {
                group_of[b] = gi;
            }
        }

        let mut outs = Vec::with_capacity(batch);
        let mut xhats = Vec::with_capacity(batch);
        let mut scales = Vec::with_capacity(batch);
        for b in 0..batch {
            let gamma = self.scale.forward(p, &conds[b]);
            let beta = self.shift.forward(p, &conds[b]);
            let scale: Vec<f64> = gamma.iter().map(|g| 1.0 + g).collect();
            let (mean, istd) = (&stats[group_of[b]].mean, &inv_std[group_of[b]]);
            let x = &xs[b];
            let mut xhat = Grid::zeros(x.rows(), x.cols());
            let mut y = Grid::zeros(x.rows(), x.cols());
            for t in (0..x.rows()).filter(|&t| masks[b][t]) {
                let (xr, hr) = (x.row(t), xhat.row_mut(t));
                for c in 0..self.channels {
                    hr[c] = (xr[c] - mean[c]) * istd[c];
                }
                let yr = y.row_mut(t);
                for c in 0..self.channels {
                    yr[c] = xhat[(t, c)] * scale[c] + beta[c];
                }
            }
            outs.push(y);
            xhats.push(xhat);
            scales.push(scale);
        }
        let trace = NormTrace {
            xhat: xhats,
            scales,
            groups,
            inv_std,
            frozen: standing.is_some(),
        };
        (outs, trace)
    }

    /// Returns input cotangents and conditioning-vector cotangents.
    pub fn backward(
        &self,
        p: &ParamStore,
        trace: &NormTrace,
        masks: &[&[bool]],
        conds: &[Vec<f64>],
        dys: &[Grid],
        grads: &mut Gradients,
    ) -> (Vec<Grid>, Vec<Vec<f64>>) {
        let batch = dys.len();
        let ch = self.channels;
        let mut dconds = Vec::with_capacity(batch);
        let mut dxhats = Vec::with_capacity(batch);
        for b in 0..batch {
            let (dy, xhat, scale) = (&dys[b], &trace.xhat[b], &trace.scales[b]);
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            let mut dxhat = Grid::zeros(dy.rows(), ch);
            for t in (0..dy.rows()).filter(|&t| masks[b][t]) {
                let (g, h) = (dy.row(t), xhat.row(t));
                let out = dxhat.row_mut(t);
                for c in 0..ch {
                    dgamma[c] += g[c] * h[c];
                    dbeta[c] += g[c];
                    out[c] = g[c] * scale[c];
                }
            }
            let mut dcond = self.scale.backward(p, &conds[b], &dgamma, grads);
            for (a, v) in dcond
                .iter_mut()
                .zip(self.shift.backward(p, &conds[b], &dbeta, grads))
            {
                *a += v;
            }
            dconds.push(dcond);
            dxhats.push(dxhat);
        }

        let mut dxs: Vec<Grid> = dxhats.iter().map(|g| Grid::zeros(g.rows(), ch)).collect();
        for (gi, group) in trace.groups.iter().enumerate() {
            let istd = &trace.inv_std[gi];
            if trace.frozen {
                for &b in group {
                    for t in (0..dxs[b].rows()).filter(|&t| masks[b][t]) {
                        for c in 0..ch {
                            dxs[b][(t, c)] = dxhats[b][(t, c)] * istd[c];
                        }
                    }
                }
                continue;
            }
            let mut sum_d = vec![0.0; ch];
            let mut sum_dx = vec![0.0; ch];
            let mut count = 0usize;
            for &b in group {
                for t in (0..dxhats[b].rows()).filter(|&t| masks[b][t]) {
                    count += 1;
                    for c in 0..ch {
                        let d = dxhats[b][(t, c)];
                        sum_d[c] += d;
                        sum_dx[c] += d * trace.xhat[b][(t, c)];
                    }
                }
            }
            let n = count.max(1) as f64;
            for &b in group {
                for t in (0..dxs[b].rows()).filter(|&t| masks[b][t]) {
                    for c in 0..ch {
                        let d = dxhats[b][(t, c)];
                        let h = trace.xhat[b][(t, c)];
                        dxs[b][(t, c)] = istd[c] * (d - sum_d[c] / n - h * sum_dx[c] / n);
                    }
                }
            }
        }
        (dxs, dconds)
    }
}
