//! Soft dynamic time warping between spectrograms.
//!
//! A path starts at the first frame of both spectrograms, ends at the last
//! frame of both, and advances by one of three moves: both frames (free),
//! the ground-truth frame only, or the generated frame only (each charged
//! the warp penalty `w`). Every visited cell is charged the mean absolute
//! difference over mel bins. The soft variant aggregates all paths with
//! `-tau * log(sum(exp(-cost / tau)))`; the hard variant takes the minimum.
//!
//! The dynamic program sweeps anti-diagonals (the skewed layout in which
//! every anti-diagonal becomes a row), keeps the full table, and
//! back-propagates the soft-min weights of the three predecessors to get the
//! exact gradient with respect to the generated spectrogram.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Stand-in for an unreachable cell.
pub const SENTINEL: f64 = 1e30;

/// Largest frame count the brute-force oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtwConfig {
    pub warp_penalty: f64,
    pub temperature: f64,
    /// Sakoe-Chiba half-width: cells with `|i - j| > band` are excluded.
    pub band: Option<usize>,
}

impl Default for DtwConfig {
    fn default() -> Self {
        Self {
            warp_penalty: 1.0,
            temperature: 0.01,
            band: None,
        }
    }
}

impl DtwConfig {
    fn validate(&self, soft: bool) -> Result<()> {
        if soft && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.warp_penalty >= 0.0 && self.warp_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "warp penalty must be non-negative, got {}",
                self.warp_penalty
            )));
        }
        Ok(())
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        self.band.is_none_or(|b| i.abs_diff(j) <= b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtwResult {
    pub value: f64,
    /// Gradient of `value` with respect to the generated spectrogram.
    pub grad_gen: Grid,
    /// Minimal path as `(gen_index, gt_index)` pairs, hard variant only.
    pub path: Option<Vec<(usize, usize)>>,
}

/// `-tau * ln(sum(exp(-v / tau)))` with max-subtraction.
pub fn soft_minimum(values: &[f64], temperature: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("soft minimum of no values"));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(soft_min_unchecked(values, temperature))
}

#[inline]
fn soft_min_unchecked(values: &[f64], temperature: f64) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.len() == 1 || lo >= SENTINEL {
        return lo;
    }
    let sum: f64 = values.iter().map(|v| (-(v - lo) / temperature).exp()).sum();
    lo - temperature * sum.ln()
}

/// `cost[i, j] = mean_f |gen[i, f] - gt[j, f]|`.
pub fn frame_cost_matrix(gen: &Grid, gt: &Grid) -> Result<Grid> {
    check_shapes(gen, gt)?;
    let f = gen.cols() as f64;
    Ok(Grid::from_fn(gen.rows(), gt.rows(), |i, j| {
        gen.row(i)
            .iter()
            .zip(gt.row(j))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / f
    }))
}

fn check_shapes(gen: &Grid, gt: &Grid) -> Result<()> {
    if gen.rows() == 0 || gt.rows() == 0 {
        return Err(Error::Empty("spectrogram without frames"));
    }
    if gen.cols() != gt.cols() || gen.cols() == 0 {
        return Err(Error::Shape(format!(
            "generated spectrogram has {} bins, ground truth {}",
            gen.cols(),
            gt.cols()
        )));
    }
    Ok(())
}

/// Shifts column `j` down by `j` rows, so anti-diagonals of `x` become the
/// rows of the `(H + W - 1) x W` result: `y[i, j] = x[clip(i - j, 0, H - 1), j]`.
pub fn skew_matrix(x: &Grid) -> Grid {
    let (h, w) = x.shape();
    Grid::from_fn(h + w - 1, w, |i, j| {
        let src = (i as isize - j as isize).clamp(0, h as isize - 1) as usize;
        x[(src, j)]
    })
}

/// Soft-DTW value from a square cost matrix using two rolling rows over the
/// skewed matrix. Forward only; used to cross-check the tabulated DP.
pub fn soft_dtw_rolling(cost: &Grid, warp_penalty: f64, temperature: f64) -> Result<f64> {
    let size = cost.cols();
    if cost.rows() != size || size == 0 {
        return Err(Error::Shape(format!(
            "rolling recurrence needs a square cost matrix, got {:?}",
            cost.shape()
        )));
    }
    let skewed = skew_matrix(cost);
    let mut path_cost = vec![SENTINEL; size + 1];
    let mut path_cost_prev = vec![SENTINEL; size + 1];
    path_cost_prev[0] = 0.0;
    for i in 0..2 * size - 1 {
        let mut next = vec![SENTINEL; size + 1];
        for j in 0..size {
            let directions = [
                path_cost_prev[j],
                saturating_add(path_cost[j + 1], warp_penalty),
                saturating_add(path_cost[j], warp_penalty),
            ];
            let best = soft_min_unchecked(&directions, temperature);
            next[j + 1] = saturating_add(best, skewed[(i, j)]);
        }
        path_cost_prev = std::mem::replace(&mut path_cost, next);
    }
    Ok(path_cost[size])
}

#[inline]
fn saturating_add(a: f64, b: f64) -> f64 {
    if a >= SENTINEL {
        SENTINEL
    } else {
        (a + b).min(SENTINEL)
    }
}

/// Predecessor candidates of cell `(i, j)`: diagonal, then advance-gt-only
/// from `(i, j - 1)`, then advance-gen-only from `(i - 1, j)`.
#[inline]
fn predecessors(table: &Grid, i: usize, j: usize, warp: f64) -> [f64; 3] {
    let diag = if i > 0 && j > 0 {
        table[(i - 1, j - 1)]
    } else {
        SENTINEL
    };
    let gt_only = if j > 0 {
        saturating_add(table[(i, j - 1)], warp)
    } else {
        SENTINEL
    };
    let gen_only = if i > 0 {
        saturating_add(table[(i - 1, j)], warp)
    } else {
        SENTINEL
    };
    [diag, gt_only, gen_only]
}

/// Accumulated path-cost table. `soft = false` gives the hard minimum.
fn accumulate(cost: &Grid, cfg: &DtwConfig, soft: bool) -> Result<Grid> {
    let (h, w) = cost.shape();
    if !cfg.in_band(h - 1, w - 1) {
        return Err(Error::Config(format!(
            "band {:?} excludes the end cell ({}, {})",
            cfg.band,
            h - 1,
            w - 1
        )));
    }
    let mut table = Grid::filled(h, w, SENTINEL);
    for d in 0..h + w - 1 {
        let i_lo = d.saturating_sub(w - 1);
        let i_hi = d.min(h - 1);
        for i in i_lo..=i_hi {
            let j = d - i;
            if !cfg.in_band(i, j) {
                continue;
            }
            let best = if d == 0 {
                0.0
            } else {
                let cand = predecessors(&table, i, j, cfg.warp_penalty);
                if soft {
                    soft_min_unchecked(&cand, cfg.temperature)
                } else {
                    cand.iter().copied().fold(f64::INFINITY, f64::min)
                }
            };
            table[(i, j)] = saturating_add(best, cost[(i, j)]);
        }
    }
    Ok(table)
}

/// Gradient of the soft value with respect to every cost cell.
fn soft_backward(cost: &Grid, table: &Grid, cfg: &DtwConfig) -> Grid {
    let (h, w) = cost.shape();
    let tau = cfg.temperature;
    let mut adj = Grid::zeros(h, w);
    adj[(h - 1, w - 1)] = 1.0;
    // weight of predecessor value `v` in the soft-min that produced cell q
    let weight = |v: f64, q: (usize, usize)| -> f64 {
        if v >= SENTINEL {
            return 0.0;
        }
        let softmin = table[q] - cost[q];
        (-(v - softmin) / tau).exp()
    };
    for d in (0..h + w - 1).rev() {
        let i_lo = d.saturating_sub(w - 1);
        let i_hi = d.min(h - 1);
        for i in i_lo..=i_hi {
            let j = d - i;
            if table[(i, j)] >= SENTINEL || (i, j) == (h - 1, w - 1) {
                continue;
            }
            let here = table[(i, j)];
            let mut acc = 0.0;
            if i + 1 < h && j + 1 < w && table[(i + 1, j + 1)] < SENTINEL {
                acc += adj[(i + 1, j + 1)] * weight(here, (i + 1, j + 1));
            }
            if j + 1 < w && table[(i, j + 1)] < SENTINEL {
                acc += adj[(i, j + 1)] * weight(here + cfg.warp_penalty, (i, j + 1));
            }
            if i + 1 < h && table[(i + 1, j)] < SENTINEL {
                acc += adj[(i + 1, j)] * weight(here + cfg.warp_penalty, (i + 1, j));
            }
            adj[(i, j)] = acc;
        }
    }
    adj
}

/// Chains a cost-matrix cotangent back to the generated spectrogram.
fn cost_grad_to_gen(gen: &Grid, gt: &Grid, grad_cost: &Grid) -> Grid {
    let f = gen.cols() as f64;
    let mut grad = Grid::zeros(gen.rows(), gen.cols());
    for i in 0..gen.rows() {
        for j in 0..gt.rows() {
            let g = grad_cost[(i, j)];
            if g == 0.0 {
                continue;
            }
            let out = grad.row_mut(i);
            for ((o, a), b) in out.iter_mut().zip(gen.row(i)).zip(gt.row(j)) {
                let diff: f64 = a - b;
                if diff != 0.0 {
                    *o += g * diff.signum() / f;
                }
            }
        }
    }
    grad
}

/// Soft-DTW value of the cost matrix and its gradient with respect to it.
pub fn soft_dtw_costs(cost: &Grid, cfg: &DtwConfig) -> Result<(f64, Grid)> {
    cfg.validate(true)?;
    if cost.is_empty() {
        return Err(Error::Empty("empty cost matrix"));
    }
    let table = accumulate(cost, cfg, true)?;
    let value = table[(cost.rows() - 1, cost.cols() - 1)];
    let grad = soft_backward(cost, &table, cfg);
    Ok((value, grad))
}

pub fn soft_dtw(gen: &Grid, gt: &Grid, cfg: &DtwConfig) -> Result<DtwResult> {
    cfg.validate(true)?;
    let cost = frame_cost_matrix(gen, gt)?;
    let (value, grad_cost) = soft_dtw_costs(&cost, cfg)?;
    Ok(DtwResult {
        value,
        grad_gen: cost_grad_to_gen(gen, gt, &grad_cost),
        path: None,
    })
}

/// Minimal-cost path. Backtracking prefers the diagonal move on ties, then
/// the ground-truth-only move, then the generated-only move.
pub fn hard_dtw(gen: &Grid, gt: &Grid, cfg: &DtwConfig) -> Result<DtwResult> {
    cfg.validate(false)?;
    let cost = frame_cost_matrix(gen, gt)?;
    let table = accumulate(&cost, cfg, false)?;
    let (h, w) = cost.shape();
    let value = table[(h - 1, w - 1)];

    let mut path = vec![(h - 1, w - 1)];
    let (mut i, mut j) = (h - 1, w - 1);
    while (i, j) != (0, 0) {
        let cand = predecessors(&table, i, j, cfg.warp_penalty);
        let mut best = 0;
        for k in 1..3 {
            if cand[k] < cand[best] {
                best = k;
            }
        }
        (i, j) = match best {
            0 => (i - 1, j - 1),
            1 => (i, j - 1),
            _ => (i - 1, j),
        };
        path.push((i, j));
    }
    path.reverse();

    let mut grad_cost = Grid::zeros(h, w);
    for &(a, b) in &path {
        grad_cost[(a, b)] = 1.0;
    }
    Ok(DtwResult {
        value,
        grad_gen: cost_grad_to_gen(gen, gt, &grad_cost),
        path: Some(path),
    })
}

/// Number of monotone paths from `(0, 0)` to `(h - 1, w - 1)` with unit
/// horizontal, vertical and diagonal steps (Delannoy numbers).
pub fn count_paths(h: usize, w: usize) -> u128 {
    let mut table = vec![vec![0u128; w]; h];
    for i in 0..h {
        for j in 0..w {
            table[i][j] = if i == 0 || j == 0 {
                1
            } else {
                table[i - 1][j] + table[i][j - 1] + table[i - 1][j - 1]
            };
        }
    }
    table[h - 1][w - 1]
}

/// Visits every valid path, calling `visit` with its total cost.
pub fn enumerate_path_costs(cost: &Grid, warp_penalty: f64, mut visit: impl FnMut(f64)) {
    fn walk(
        cost: &Grid,
        warp: f64,
        (i, j): (usize, usize),
        acc: f64,
        visit: &mut dyn FnMut(f64),
    ) {
        let (h, w) = cost.shape();
        let acc = acc + cost[(i, j)];
        if (i, j) == (h - 1, w - 1) {
            visit(acc);
            return;
        }
        if i + 1 < h && j + 1 < w {
            walk(cost, warp, (i + 1, j + 1), acc, visit);
        }
        if j + 1 < w {
            walk(cost, warp, (i, j + 1), acc + warp, visit);
        }
        if i + 1 < h {
            walk(cost, warp, (i + 1, j), acc + warp, visit);
        }
    }
    walk(cost, warp_penalty, (0, 0), 0.0, &mut visit);
}

/// Soft-DTW by explicit enumeration of every path. Test oracle.
pub fn brute_force_soft_dtw(gen: &Grid, gt: &Grid, cfg: &DtwConfig) -> Result<f64> {
    cfg.validate(true)?;
    let longest = gen.rows().max(gt.rows());
    if longest > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            len: longest,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let cost = frame_cost_matrix(gen, gt)?;
    let mut costs = Vec::new();
    enumerate_path_costs(&cost, cfg.warp_penalty, |c| costs.push(c));
    soft_minimum(&costs, cfg.temperature)
}
