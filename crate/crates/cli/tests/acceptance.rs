//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion.
//!
//! Runs with the default harness disabled. The process exits non-zero on a
//! failed criterion only when `ACCEPTANCE_STRICT` is set, so a known gap
//! shows up in the report without breaking `cargo test`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use softalign::aligner::{interpolate, positions_from_lengths};
use softalign::diffcheck::{check_all, registry, DEFAULT_TOLERANCE};
use softalign::rng::substream;
use softalign::signal::{mu_law_decode, mu_law_encode, MelFrontend, MelParams, MU};
use softalign::softdtw::{brute_force_soft_dtw, count_paths, hard_dtw, soft_dtw, DtwConfig};
use softalign::toytts::{held_out_prediction_loss, train, LossMode, ToyTask, TrainConfig};
use softalign::Grid;

const TOY_MEDIAN_ERROR: f64 = 0.15;
const TOY_CORRELATION: f64 = 0.95;
const TOY_UTTERANCES: usize = 64;
const TOY_TIME_LIMIT: Duration = Duration::from_secs(600);
const LOSS_DROP: f64 = 0.25;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_STEPS: usize = 1000;

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, name: &str, passed: bool, detail: String) {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failed.push(name.to_string());
        }
    }
}

fn random_grid(rng: &mut impl Rng, rows: usize, cols: usize) -> Grid {
    Grid::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn dtw_oracle(r: &mut Report) {
    let start = Instant::now();
    let cfg = DtwConfig::default();
    let mut worst: f64 = 0.0;
    let mut rng = substream(1, 0);
    for t in 2..=6 {
        for f in [1, 3] {
            for _ in 0..100 {
                let gen = random_grid(&mut rng, t, f);
                let gt = random_grid(&mut rng, t, f);
                let dp = soft_dtw(&gen, &gt, &cfg).unwrap().value;
                let brute = brute_force_soft_dtw(&gen, &gt, &cfg).unwrap();
                worst = worst.max((dp - brute).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        "soft-dtw oracle equivalence",
        worst <= 1e-9 && secs < 30.0,
        format!("max |dp - brute| = {worst:.2e} over 1000 instances (<= 1e-9), {secs:.2} s (< 30 s)"),
    );
}

fn temperature_limit(r: &mut Report) {
    let tau = 1e-4;
    let bound = tau * (count_paths(6, 6) as f64).ln();
    let soft_cfg = DtwConfig {
        temperature: tau,
        ..DtwConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut rng = substream(2, 0);
    for _ in 0..200 {
        let gen = random_grid(&mut rng, 6, 3);
        let gt = random_grid(&mut rng, 6, 3);
        let soft = soft_dtw(&gen, &gt, &soft_cfg).unwrap().value;
        let hard = hard_dtw(&gen, &gt, &soft_cfg).unwrap().value;
        worst = worst.max((soft - hard).abs());
    }
    r.line(
        "temperature limit",
        worst <= bound,
        format!("max |soft - hard| = {worst:.3e} at tau 1e-4, bound tau ln(1683) = {bound:.3e}"),
    );
}

fn path_length(r: &mut Report) {
    let cfg = DtwConfig::default();
    let mut rng = substream(3, 0);
    let mut violations = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=12);
        let gen = random_grid(&mut rng, t, 2);
        let gt = random_grid(&mut rng, t, 2);
        let k = hard_dtw(&gen, &gt, &cfg).unwrap().path.unwrap().len();
        if k < t || k > 2 * t - 1 {
            violations += 1;
        }
    }
    r.line(
        "path-length bound",
        violations == 0,
        format!("{violations} of 1000 hard paths outside [T, 2T-1]"),
    );
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let ops = registry();
    let reports = check_all(&ops, &[0, 1, 2], DEFAULT_TOLERANCE).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = reports
        .iter()
        .filter(|x| !x.passed)
        .map(|x| format!("{}@{}", x.name, x.seed))
        .collect();
    let worst = reports.iter().map(|x| x.max_rel_error).fold(0.0, f64::max);
    r.line(
        "gradient suite",
        failed.is_empty() && secs < 300.0,
        format!(
            "{} ops x 3 seeds, worst rel err {worst:.2e} (<= 1e-4), failures {failed:?}, {secs:.1} s (< 300 s)",
            ops.len()
        ),
    );
}

fn aligner_invariants(r: &mut Report) {
    let mut rng = substream(4, 0);
    let mut bad = Vec::new();
    let (mut worst_row, mut worst_pad, mut worst_window): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let channels = 3;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let valid = rng.random_range(1..=n);
        let lengths: Vec<f64> = (0..n)
            .map(|i| if i < valid { rng.random_range(0.0..6.0) } else { 0.0 })
            .collect();
        let p = positions_from_lengths(&lengths, valid);
        if p.ends.windows(2).any(|w| w[1] < w[0]) {
            bad.push("ends");
        }
        for ((&c, &e), &l) in p.centres.iter().zip(&p.ends).zip(&lengths) {
            if c < e - l - 1e-12 || c > e + 1e-12 {
                bad.push("centres");
            }
        }
        let mask: Vec<bool> = (0..n).map(|i| i < valid).collect();
        let feats = random_grid(&mut rng, n, channels);
        let total = p.total.ceil() as usize + 2;
        let full = interpolate(&feats, &p.centres, &mask, 0, total, 1.0);
        for t in 0..total {
            let row = full.weights.row(t);
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            worst_pad = worst_pad.max(row[valid..].iter().sum::<f64>());
        }
        let offset = rng.random_range(0..total);
        let len = rng.random_range(1..=total - offset);
        let win = interpolate(&feats, &p.centres, &mask, offset as i64, len, 1.0);
        for s in 0..len {
            for (a, b) in win.features.row(s).iter().zip(full.features.row(offset + s)) {
                worst_window = worst_window.max((a - b).abs());
            }
        }
    }
    bad.dedup();
    r.line(
        "aligner invariants",
        bad.is_empty() && worst_row <= 1e-6 && worst_pad <= 1e-30 && worst_window <= 1e-6,
        format!(
            "violations {bad:?}, row-sum err {worst_row:.1e} (<= 1e-6), padded mass {worst_pad:.1e} (<= 1e-30), window vs full {worst_window:.1e} (<= 1e-6)"
        ),
    );
}

fn signal_pipeline(r: &mut Report) {
    let params = MelParams::default();
    let sr = params.sample_rate;
    let frontend = MelFrontend::new(params).unwrap();
    let samples: Vec<f64> = (0..48_000)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr).sin())
        .collect();
    let mel = frontend.compute(&samples, false).unwrap();
    let shape = (mel.num_frames(), mel.num_bins());
    let min = mel.values.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let mut rng = substream(5, 0);
    let x: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let back = mu_law_decode(&mu_law_encode(&x, MU).unwrap(), MU).unwrap();
    let roundtrip = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.line(
        "signal pipeline",
        shape == (47, 80) && roundtrip <= 1e-12 && min >= 0.0,
        format!("2 s at 24 kHz -> {}x{} (47x80), mu-law roundtrip {roundtrip:.1e} (<= 1e-12), min mel {min:.3e} (>= 0)", shape.0, shape.1),
    );
}

fn run(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_softalign")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Column `name` of a header-plus-one-row CSV.
fn column(csv: &str, name: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    row[i].parse().unwrap()
}

fn toy_end_to_end(r: &mut Report, dir: &Path) -> bool {
    let dir_s = dir.to_str().unwrap();
    let start = Instant::now();
    let (ok, train_csv) = run(&["train-toy", "--steps", "2000", "--seed", "0", "--out", dir_s]);
    let elapsed = start.elapsed();
    if !ok {
        r.line("toy end-to-end", false, "train-toy failed".into());
        return false;
    }
    let (ok, eval_csv) = run(&["eval-durations", "--checkpoint", dir_s, "--utterances", "64"]);
    if !ok {
        r.line("toy end-to-end", false, "eval-durations failed".into());
        return false;
    }
    let median = column(&eval_csv, "median_rel_err");
    let corr = column(&eval_csv, "length_correlation");
    let utts = column(&eval_csv, "utterances") as usize;
    r.line(
        "toy end-to-end",
        elapsed <= TOY_TIME_LIMIT && median <= TOY_MEDIAN_ERROR && corr >= TOY_CORRELATION && utts == TOY_UTTERANCES,
        format!(
            "2000 steps in {:.0} s (<= 600 s), median per-token error {:.3} (<= {TOY_MEDIAN_ERROR}), length correlation {corr:.4} (>= {TOY_CORRELATION}) on {utts} utterances",
            elapsed.as_secs_f64(),
            median
        ),
    );
    let first = column(&train_csv, "initial_pred");
    let last = column(&train_csv, "final_pred");
    r.line(
        "trainer loss drop",
        last < LOSS_DROP * first,
        format!("final pred {last:.3} vs step-0 {first:.3}, ratio {:.3} (< {LOSS_DROP})", last / first),
    );
    true
}

fn ablation(r: &mut Report) {
    let task = ToyTask::stochastic();
    let score = |loss: LossMode| -> Vec<f64> {
        ABLATION_SEEDS
            .iter()
            .map(|&seed| {
                let config = TrainConfig {
                    steps: ABLATION_STEPS,
                    seed,
                    loss,
                    ..TrainConfig::default()
                };
                let out = train(&task, &config, None).unwrap();
                held_out_prediction_loss(&out.generator, config.window_steps, 4, 16, 100).unwrap().soft_dtw
            })
            .collect()
    };
    let median3 = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let dtw = score(LossMode::SoftDtw);
    let l1 = score(LossMode::L1);
    let (md, ml) = (median3(dtw.clone()), median3(l1.clone()));
    r.line(
        "ablation direction",
        md <= ml,
        format!("stochastic durations, held-out soft-dtw loss median over seeds {ABLATION_SEEDS:?}: dtw-trained {md:.4} {dtw:.3?} <= l1-trained {ml:.4} {l1:.3?}"),
    );
}

fn benchmark(r: &mut Report, checkpoint: Option<&Path>) {
    let mut args = vec!["bench", "--seconds", "1", "--batch", "1", "--runs", "101"];
    if let Some(d) = checkpoint {
        args.extend(["--checkpoint", d.to_str().unwrap()]);
    }
    let (ok, csv) = run(&args);
    if !ok {
        r.line("benchmark harness", false, "bench failed".into());
        return;
    }
    let runs = column(&csv, "runs") as usize;
    let rtf = column(&csv, "realtime_factor");
    r.line(
        "benchmark harness",
        runs == 101 && rtf > 1.0 && csv.starts_with("batch_size,utterance_seconds,runs,median_run_time_s,realtime_factor"),
        format!("median of {runs} runs (101), realtime factor {rtf:.1} (> 1)"),
    );
}

fn main() {
    // `cargo test -- --list` and filtered runs should not start the suite
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut r = Report { failed: Vec::new() };
    dtw_oracle(&mut r);
    temperature_limit(&mut r);
    path_length(&mut r);
    gradient_suite(&mut r);
    aligner_invariants(&mut r);
    signal_pipeline(&mut r);
    let dir = tempfile::tempdir().unwrap();
    let trained = toy_end_to_end(&mut r, dir.path());
    ablation(&mut r);
    benchmark(&mut r, trained.then_some(dir.path()));
    println!(
        "acceptance: {} failed {:?}",
        r.failed.len(),
        r.failed
    );
    if !r.failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
