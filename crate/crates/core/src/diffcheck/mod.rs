//! Finite-difference verification of hand-written backward passes.
//!
//! Every operation with a backward pass is wrapped as a
//! [`DifferentiableOp`] over a flat input vector. The check contracts the
//! output with a random probe vector and compares the analytic gradient of
//! that scalar with central differences. Coordinates whose one-sided
//! differences disagree sit on a kink (a ReLU corner, an absolute value at
//! zero); they are excluded from the error and counted, and a check with
//! too many of them fails.

use std::any::Any;

use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, substream};

mod registry;

pub use registry::{registry, Scaled};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Largest fraction of kink coordinates a passing check may exclude.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;
/// One-sided differences further apart than this, relative to
/// `max(1, |central|)`, mark a kink.
pub const KINK_THRESHOLD: f64 = 1e-3;

/// Forward state saved for the matching backward call.
pub type Saved = Box<dyn Any>;

pub trait DifferentiableOp {
    fn name(&self) -> &str;

    /// Deterministic inputs for `seed`, kept away from the op's own
    /// non-smooth points.
    fn sample_inputs(&self, seed: u64) -> Vec<f64>;

    fn forward(&self, inputs: &[f64]) -> Result<(Vec<f64>, Saved)>;

    /// Gradient of `<d_out, forward(inputs)>` with respect to `inputs`.
    /// `saved` must come from `forward` on the same inputs.
    fn backward(&self, inputs: &[f64], saved: &Saved, d_out: &[f64]) -> Vec<f64>;
}

/// Recovers the concrete state saved by an op's forward.
pub fn saved_as<T: 'static>(saved: &Saved) -> &T {
    saved
        .downcast_ref::<T>()
        .expect("backward received state from a different forward")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdGradient {
    pub values: Vec<f64>,
    /// Coordinates where forward and backward differences disagree.
    pub kinks: Vec<bool>,
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
) -> Result<FdGradient> {
    let eval = |x: &[f64]| -> Result<f64> {
        let v = f(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("forward value during finite differencing".into()))
        }
    };
    let f0 = eval(x)?;
    let mut values = Vec::with_capacity(x.len());
    let mut kinks = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = eval(&probe)?;
        probe[i] = x[i] - step;
        let minus = eval(&probe)?;
        probe[i] = x[i];
        let central = (plus - minus) / (2.0 * step);
        let forward = (plus - f0) / step;
        let backward = (f0 - minus) / step;
        values.push(central);
        kinks.push((forward - backward).abs() > KINK_THRESHOLD * central.abs().max(1.0));
    }
    Ok(FdGradient { values, kinks })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub name: String,
    pub seed: u64,
    pub max_abs_error: f64,
    /// `max |fd - analytic| / max(1, |fd|)` over the smooth coordinates.
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub step: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub excluded: usize,
    pub passed: bool,
}

impl FdReport {
    pub const CSV_HEADER: &'static str = "name,seed,max_rel_err,excluded_pct,pass";

    pub fn excluded_pct(&self) -> f64 {
        100.0 * self.excluded as f64 / self.coordinates.max(1) as f64
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.3e},{:.2},{}",
            self.name,
            self.seed,
            self.max_rel_error,
            self.excluded_pct(),
            self.passed
        )
    }
}

/// Checks one op at one seed. The probe vector is drawn from the seed too,
/// so the report is reproducible.
pub fn check(op: &dyn DifferentiableOp, seed: u64, tolerance: f64, step: f64) -> Result<FdReport> {
    let x = op.sample_inputs(seed);
    let (y, saved) = op.forward(&x)?;
    let probe = gaussian_vec(&mut substream(seed, 0xfd), y.len());
    let analytic = op.backward(&x, &saved, &probe);
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!(
            "{}: gradient has {} entries for {} inputs",
            op.name(),
            analytic.len(),
            x.len()
        )));
    }
    let fd = finite_difference_gradient(
        |x| Ok(op.forward(x)?.0.iter().zip(&probe).map(|(a, b)| a * b).sum()),
        &x,
        step,
    )?;
    let mut report = FdReport {
        name: op.name().to_string(),
        seed,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_coordinate: 0,
        step,
        tolerance,
        coordinates: x.len(),
        excluded: 0,
        passed: false,
    };
    for (i, ((&n, &a), &kink)) in fd.values.iter().zip(&analytic).zip(&fd.kinks).enumerate() {
        if kink {
            report.excluded += 1;
            continue;
        }
        let abs = (n - a).abs();
        let rel = abs / n.abs().max(1.0);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    report.passed = report.max_rel_error <= tolerance
        && (report.excluded as f64) <= MAX_EXCLUDED_FRACTION * x.len() as f64;
    Ok(report)
}

/// One report per op and seed, in registry order.
pub fn check_all(ops: &[Box<dyn DifferentiableOp>], seeds: &[u64], tolerance: f64) -> Result<Vec<FdReport>> {
    let mut out = Vec::with_capacity(ops.len() * seeds.len());
    for op in ops {
        for &seed in seeds {
            out.push(check(op.as_ref(), seed, tolerance, DEFAULT_STEP)?);
        }
    }
    Ok(out)
}
