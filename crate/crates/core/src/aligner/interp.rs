//! Token positions from lengths and Gaussian-kernel interpolation onto an
//! output grid, with hand-written backward passes.

use crate::grid::Grid;

/// Constant subtracted from the logits of padded tokens.
pub const MASKED_LOGIT: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct Positions {
    pub ends: Vec<f64>,
    pub centres: Vec<f64>,
    /// End of the last valid token.
    pub total: f64,
}

/// `e = cumsum(l)`, `c = e - l / 2`, `total = e[true_length - 1]`.
pub fn positions_from_lengths(lengths: &[f64], true_length: usize) -> Positions {
    assert!(true_length <= lengths.len());
    let mut ends = Vec::with_capacity(lengths.len());
    let mut acc = 0.0;
    for &l in lengths {
        acc += l;
        ends.push(acc);
    }
    let centres = ends.iter().zip(lengths).map(|(e, l)| e - l / 2.0).collect();
    let total = if true_length == 0 {
        0.0
    } else {
        ends[true_length - 1]
    };
    Positions {
        ends,
        centres,
        total,
    }
}

/// Length cotangent from centre, end and total cotangents.
pub fn positions_backward(
    d_centres: &[f64],
    d_ends: Option<&[f64]>,
    d_total: f64,
    true_length: usize,
) -> Vec<f64> {
    let n = d_centres.len();
    let mut d_e: Vec<f64> = d_centres.to_vec();
    if let Some(de) = d_ends {
        d_e.iter_mut().zip(de).for_each(|(a, b)| *a += b);
    }
    if true_length > 0 {
        d_e[true_length - 1] += d_total;
    }
    // e_k depends on l_n for every n <= k
    let mut d_l = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        suffix += d_e[k];
        d_l[k] = suffix - d_centres[k] / 2.0;
    }
    d_l
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    /// `S x D` aligned features.
    pub features: Grid,
    /// `S x N` interpolation weights.
    pub weights: Grid,
}

/// Softmax over `-(t + offset - c_n)^2 / sigma2`, with masked tokens pushed
/// down by [`MASKED_LOGIT`], applied to the rows of `features`.
pub fn interpolate(
    features: &Grid,
    centres: &[f64],
    mask: &[bool],
    offset: i64,
    length: usize,
    sigma2: f64,
) -> Interpolation {
    let n = centres.len();
    assert_eq!(features.rows(), n);
    assert_eq!(mask.len(), n);
    let mut weights = Grid::zeros(length, n);
    let mut logits = vec![0.0; n];
    for t in 0..length {
        let pos = (t as i64 + offset) as f64;
        for k in 0..n {
            let d = pos - centres[k];
            logits[k] = -(d * d) / sigma2 - if mask[k] { 0.0 } else { MASKED_LOGIT };
        }
        let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = weights.row_mut(t);
        let mut sum = 0.0;
        for (w, l) in row.iter_mut().zip(&logits) {
            *w = (l - hi).exp();
            sum += *w;
        }
        row.iter_mut().for_each(|w| *w /= sum);
    }
    let mut out = Grid::zeros(length, features.cols());
    for t in 0..length {
        for k in 0..n {
            let w = weights[(t, k)];
            if w == 0.0 {
                continue;
            }
            for (o, h) in out.row_mut(t).iter_mut().zip(features.row(k)) {
                *o += w * h;
            }
        }
    }
    Interpolation {
        features: out,
        weights,
    }
}

/// Returns `(d_features, d_centres)` given the forward weights.
pub fn interpolate_backward(
    features: &Grid,
    centres: &[f64],
    offset: i64,
    sigma2: f64,
    weights: &Grid,
    d_out: &Grid,
) -> (Grid, Vec<f64>) {
    let n = centres.len();
    let mut d_features = Grid::zeros(n, features.cols());
    let mut d_centres = vec![0.0; n];
    let mut d_w = vec![0.0; n];
    for t in 0..weights.rows() {
        let g = d_out.row(t);
        let w = weights.row(t);
        let mut mean = 0.0;
        for k in 0..n {
            if w[k] == 0.0 {
                d_w[k] = 0.0;
                continue;
            }
            d_w[k] = g.iter().zip(features.row(k)).map(|(a, b)| a * b).sum();
            mean += w[k] * d_w[k];
            for (df, gv) in d_features.row_mut(k).iter_mut().zip(g) {
                *df += w[k] * gv;
            }
        }
        let pos = (t as i64 + offset) as f64;
        for k in 0..n {
            if w[k] == 0.0 {
                continue;
            }
            let d_logit = w[k] * (d_w[k] - mean);
            // logit = -(pos - c)^2 / sigma2
            d_centres[k] += d_logit * 2.0 * (pos - centres[k]) / sigma2;
        }
    }
    (d_features, d_centres)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positions_examples() {
        let p = positions_from_lengths(&[2.0, 4.0, 6.0], 3);
        assert_eq!(p.ends, vec![2.0, 6.0, 12.0]);
        assert_eq!(p.centres, vec![1.0, 4.0, 9.0]);
        assert_eq!(p.total, 12.0);
        let z = positions_from_lengths(&[0.0; 4], 4);
        assert!(z.ends.iter().chain(&z.centres).all(|&v| v == 0.0));
        assert_eq!(z.total, 0.0);
        let padded = positions_from_lengths(&[1.0, 2.0, 0.0, 0.0], 2);
        assert_eq!(padded.total, 3.0);
    }

    #[test]
    fn two_token_weights() {
        let h = Grid::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let r = interpolate(&h, &[1.0, 4.0], &[true, true], 0, 3, 10.0);
        let e = (-0.9f64).exp();
        assert!((r.weights[(1, 0)] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((r.weights[(1, 1)] - e / (1.0 + e)).abs() < 1e-15);
        assert!((r.weights[(1, 0)] - 0.7109).abs() < 5e-5);
        assert!((r.weights[(1, 1)] - 0.2891).abs() < 5e-5);
    }

    #[test]
    fn single_token_takes_all_weight() {
        let h = Grid::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let r = interpolate(&h, &[7.5], &[true], -3, 20, 10.0);
        for t in 0..20 {
            assert_eq!(r.weights[(t, 0)], 1.0);
            assert_eq!(r.features.row(t), h.row(0));
        }
    }

    #[test]
    fn shared_centre_and_feature_is_reproduced() {
        let h = Grid::from_rows(&[vec![0.25, 1.5], vec![0.25, 1.5]]).unwrap();
        let r = interpolate(&h, &[3.0, 3.0], &[true, true], 0, 8, 10.0);
        for t in 0..8 {
            assert!((r.features[(t, 0)] - 0.25).abs() < 1e-15);
            assert!((r.features[(t, 1)] - 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn padded_tokens_get_no_weight() {
        let h = Grid::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let mask = [true, true, false, false];
        let r = interpolate(&h, &[1.0, 3.0, 3.0, 3.0], &mask, 0, 10, 10.0);
        for t in 0..10 {
            assert!(r.weights[(t, 2)] <= 1e-30 && r.weights[(t, 3)] <= 1e-30);
            let s: f64 = r.weights.row(t)[..2].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn windows_are_slices_of_the_full_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Grid::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let centres = [0.5, 2.0, 4.5, 8.0, 11.0];
        let mask = [true; 5];
        let full = interpolate(&h, &centres, &mask, 0, 14, 10.0);
        for (offset, len) in [(0i64, 14usize), (3, 5), (9, 5)] {
            let win = interpolate(&h, &centres, &mask, offset, len, 10.0);
            let o = offset as usize;
            assert_eq!(win.features, full.features.slice_rows(o, o + len));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Grid::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let lengths = [1.5, 2.0, 0.5, 0.0];
        let mask = [true, true, true, false];
        let (offset, len, sigma2) = (-1i64, 8usize, 2.0);
        let d_out = Grid::from_fn(len, 3, |_, _| rng.random_range(-1.0..1.0));
        let d_total = 0.7;
        let objective = |h: &Grid, l: &[f64]| {
            let p = positions_from_lengths(l, 3);
            interpolate(h, &p.centres, &mask, offset, len, sigma2)
                .features
                .dot(&d_out)
                + d_total * p.total
        };
        let p = positions_from_lengths(&lengths, 3);
        let fwd = interpolate(&h, &p.centres, &mask, offset, len, sigma2);
        let (dh, dc) = interpolate_backward(&h, &p.centres, offset, sigma2, &fwd.weights, &d_out);
        let dl = positions_backward(&dc, None, d_total, 3);
        let eps = 1e-6;
        for k in 0..3 {
            let (mut lp, mut lm) = (lengths, lengths);
            lp[k] += eps;
            lm[k] -= eps;
            let fd = (objective(&h, &lp) - objective(&h, &lm)) / (2.0 * eps);
            assert!((fd - dl[k]).abs() < 1e-7, "length {k}: {fd} vs {}", dl[k]);
        }
        for idx in 0..h.as_slice().len() {
            let (mut hp, mut hm) = (h.clone(), h.clone());
            hp.as_mut_slice()[idx] += eps;
            hm.as_mut_slice()[idx] -= eps;
            let fd = (objective(&hp, &lengths) - objective(&hm, &lengths)) / (2.0 * eps);
            assert!((fd - dh.as_slice()[idx]).abs() < 1e-7);
        }
    }
}
