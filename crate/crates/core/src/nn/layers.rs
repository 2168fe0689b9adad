//! Convolution, affine and pointwise layers with explicit backward passes.
//!
//! Sequences are `len x channels` grids. Every layer's backward takes the
//! same inputs its forward saw plus the output cotangent, accumulates
//! parameter gradients into a [`Gradients`] buffer and returns the input
//! cotangent.

use rand::Rng;

use super::init::orthogonal;
use super::params::{Gradients, ParamId, ParamStore};
use crate::grid::Grid;

/// 1-D convolution with "same" zero padding and optional input masking.
///
/// Weights are stored as `[kernel, out, in]`. When a mask is supplied,
/// inputs at masked-out positions are read as zero by every tap, so outputs
/// never depend on them.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel;
        let flat = orthogonal(out_channels, fan_in, gain, rng);
        // flat is [out, in * kernel] with column index i * kernel + j
        let mut w = vec![0.0; kernel * out_channels * in_channels];
        for o in 0..out_channels {
            for i in 0..in_channels {
                for j in 0..kernel {
                    w[(j * out_channels + o) * in_channels + i] = flat[o * fan_in + i * kernel + j];
                }
            }
        }
        let weight = store.add(
            format!("{name}/weight"),
            &[kernel, out_channels, in_channels],
            w,
        );
        let bias = store.add(format!("{name}/bias"), &[out_channels], vec![0.0; out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            dilation,
        }
    }

    #[inline]
    fn source(&self, t: usize, tap: usize, len: usize) -> Option<usize> {
        let half = (self.kernel - 1) / 2;
        let src = t as isize + (tap as isize - half as isize) * self.dilation as isize;
        (0..len as isize).contains(&src).then_some(src as usize)
    }

    pub fn forward(&self, p: &ParamStore, x: &Grid, mask: Option<&[bool]>) -> Grid {
        debug_assert_eq!(x.cols(), self.in_channels);
        let len = x.rows();
        let w = p.get(self.weight);
        let b = p.get(self.bias);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut y = Grid::zeros(len, cout);
        for t in 0..len {
            let out = y.row_mut(t);
            out.copy_from_slice(b);
            for tap in 0..self.kernel {
                let Some(src) = self.source(t, tap, len) else {
                    continue;
                };
                if mask.is_some_and(|m| !m[src]) {
                    continue;
                }
                let xs = x.row(src);
                let wt = &w[tap * cout * cin..(tap + 1) * cout * cin];
                for (o, acc) in out.iter_mut().enumerate() {
                    let row = &wt[o * cin..(o + 1) * cin];
                    *acc += row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        x: &Grid,
        mask: Option<&[bool]>,
        dy: &Grid,
        grads: &mut Gradients,
    ) -> Grid {
        let len = x.rows();
        let (cin, cout) = (self.in_channels, self.out_channels);
        let w = p.get(self.weight);
        let mut dx = Grid::zeros(len, cin);
        {
            let db = grads.get_mut(self.bias);
            for t in 0..len {
                for (acc, g) in db.iter_mut().zip(dy.row(t)) {
                    *acc += g;
                }
            }
        }
        let dw = grads.get_mut(self.weight);
        for t in 0..len {
            let g = dy.row(t);
            for tap in 0..self.kernel {
                let Some(src) = self.source(t, tap, len) else {
                    continue;
                };
                if mask.is_some_and(|m| !m[src]) {
                    continue;
                }
                let xs = x.row(src);
                let base = tap * cout * cin;
                let dxs = dx.row_mut(src);
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let off = base + o * cin;
                    let wrow = &w[off..off + cin];
                    let dwrow = &mut dw[off..off + cin];
                    for i in 0..cin {
                        dwrow[i] += go * xs[i];
                        dxs[i] += go * wrow[i];
                    }
                }
            }
        }
        dx
    }
}

/// `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}/weight"),
            &[out_features, in_features],
            orthogonal(out_features, in_features, gain, rng),
        );
        let bias = store.add(format!("{name}/bias"), &[out_features], vec![0.0; out_features]);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = p.get(self.weight);
        p.get(self.bias)
            .iter()
            .enumerate()
            .map(|(o, b)| {
                b + w[o * self.in_features..(o + 1) * self.in_features]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        x: &[f64],
        dy: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let n = self.in_features;
        for (acc, g) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *acc += g;
        }
        let w = p.get(self.weight);
        let mut dx = vec![0.0; n];
        let dw = grads.get_mut(self.weight);
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for i in 0..n {
                dw[o * n + i] += g * x[i];
                dx[i] += g * w[o * n + i];
            }
        }
        dx
    }
}

pub fn relu(x: &Grid) -> Grid {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Cotangent through a ReLU given its input `x`.
pub fn relu_backward(x: &Grid, dy: &Grid) -> Grid {
    let mut dx = dy.clone();
    for (g, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn leaky_relu(x: &Grid, slope: f64) -> Grid {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= slope
        }
    });
    y
}

pub fn leaky_relu_backward(x: &Grid, dy: &Grid, slope: f64) -> Grid {
    let mut dx = dy.clone();
    for (g, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if v < 0.0 {
            *g *= slope;
        }
    }
    dx
}

/// Repeats every row `factor` times.
pub fn upsample_nearest(x: &Grid, factor: usize) -> Grid {
    let mut y = Grid::zeros(x.rows() * factor, x.cols());
    for t in 0..x.rows() {
        for r in 0..factor {
            y.row_mut(t * factor + r).copy_from_slice(x.row(t));
        }
    }
    y
}

pub fn upsample_nearest_backward(dy: &Grid, factor: usize) -> Grid {
    let rows = dy.rows() / factor;
    let mut dx = Grid::zeros(rows, dy.cols());
    for t in 0..rows {
        let out = dx.row_mut(t);
        for r in 0..factor {
            for (a, b) in out.iter_mut().zip(dy.row(t * factor + r)) {
                *a += b;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Grid {
        Grid::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dilated_conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 3, 2, 3, 2, 1.0, &mut rng);
        store.get_mut(conv.bias).copy_from_slice(&[0.5, -0.25]);
        let x = random_grid(&mut rng, 7, 3);
        let y = conv.forward(&store, &x, None);
        let w = store.get(conv.weight);
        for t in 0..7 {
            for o in 0..2 {
                let mut expected = store.get(conv.bias)[o];
                for tap in 0..3 {
                    let src = t as isize + (tap as isize - 1) * 2;
                    if !(0..7).contains(&src) {
                        continue;
                    }
                    for i in 0..3 {
                        expected += w[(tap * 2 + o) * 3 + i] * x[(src as usize, i)];
                    }
                }
                assert!((y[(t, o)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_inputs_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 4, 4, 3, 1, 1.0, &mut rng);
        let mask = [true, true, true, false, false, false];
        let x = random_grid(&mut rng, 6, 4);
        let mut x2 = x.clone();
        for t in 3..6 {
            x2.row_mut(t).iter_mut().for_each(|v| *v = 100.0);
        }
        let a = conv.forward(&store, &x, Some(&mask));
        let b = conv.forward(&store, &x2, Some(&mask));
        assert_eq!(a, b);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 3, 2, 3, 2, 1.0, &mut rng);
        let mask = [true, true, false, true, true, true, false];
        let x = random_grid(&mut rng, 7, 3);
        let dy = random_grid(&mut rng, 7, 2);
        let mut grads = store.zero_grads();
        let dx = conv.backward(&store, &x, Some(&mask), &dy, &mut grads);
        let h = 1e-6;
        for idx in 0..x.as_slice().len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[idx] += h;
            xm.as_mut_slice()[idx] -= h;
            let fd = (conv.forward(&store, &xp, Some(&mask)).dot(&dy)
                - conv.forward(&store, &xm, Some(&mask)).dot(&dy))
                / (2.0 * h);
            assert!((fd - dx.as_slice()[idx]).abs() < 1e-8);
        }
        let flat = store.flatten();
        let analytic = grads.flatten();
        for k in 0..flat.len() {
            let mut plus = store.clone();
            let mut minus = store.clone();
            let mut v = flat.clone();
            v[k] += h;
            plus.set_flat(&v);
            v[k] -= 2.0 * h;
            minus.set_flat(&v);
            let fd = (conv.forward(&plus, &x, Some(&mask)).dot(&dy)
                - conv.forward(&minus, &x, Some(&mask)).dot(&dy))
                / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "param {k}");
        }
    }

    #[test]
    fn upsample_backward_sums_repeats() {
        let x = Grid::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = upsample_nearest(&x, 3);
        assert_eq!(y.rows(), 6);
        assert_eq!(y.row(4), &[3.0, 4.0]);
        let dx = upsample_nearest_backward(&Grid::filled(6, 2, 1.0), 3);
        assert_eq!(dx, Grid::filled(2, 2, 3.0));
    }
}
