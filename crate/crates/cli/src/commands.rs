use std::fmt::Write as _;
use std::path::Path;

use softalign::aligner::{Conditioning, OutputWindow};
use softalign::diffcheck::{check_all, registry, FdReport};
use softalign::rng::substream;
use softalign::signal::io::{read_spectrogram, read_wav, write_spectrogram};
use softalign::signal::{MelFrontend, MelParams};
use softalign::softdtw::{hard_dtw, soft_dtw, DtwConfig};
use softalign::toytts::checkpoint;
use softalign::toytts::{
    distinct_step_counts, eval, histogram_csv, id_symbol, length_histogram, preprocess_tokens, train, BenchReport,
    Generator, ModelConfig, SubstitutionTable, ToyTask,
};
use softalign::{Error, Result};

use crate::config::resolve;
use crate::TrainArgs;

pub const TRAIN_SUMMARY_HEADER: &str = "steps,seconds,initial_pred,final_pred,final_length";
pub const EVAL_SUMMARY_HEADER: &str =
    "utterances,tokens,median_rel_err,mean_rel_err,length_correlation,distinct_lengths,heldout_soft_dtw,heldout_l1";

pub fn train_toy(args: &TrainArgs) -> Result<bool> {
    let (task, config) = resolve(args)?;
    if config.expected_to_fail() {
        eprintln!("warning: lambda_length = 0, this run is not expected to train");
    }
    let every = (config.steps / 20).max(1);
    let mut progress = |step: usize, b: &softalign::losses::LossBreakdown| {
        if step % every == 0 || step + 1 == config.steps {
            eprintln!("step {step}: pred {:.4} length {:.4} total {:.4}", b.pred, b.length, b.total);
        }
    };
    let outcome = train(&task, &config, Some(&mut progress))?;
    std::fs::create_dir_all(&args.out)?;
    checkpoint::save(&outcome.generator, &args.out)?;
    std::fs::write(args.out.join("metrics.csv"), outcome.csv())?;

    let first = outcome.history.first().ok_or(Error::Empty("training history"))?;
    let last = outcome.history.last().ok_or(Error::Empty("training history"))?;
    println!("{TRAIN_SUMMARY_HEADER}");
    println!(
        "{},{:.2},{:.6},{:.6},{:.6}",
        outcome.history.len(),
        outcome.seconds,
        first.pred,
        last.pred,
        last.length
    );
    Ok(true)
}

pub fn eval_durations(
    dir: &Path,
    utterances: usize,
    text: &str,
    draws: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<bool> {
    let gen = checkpoint::load(dir)?;
    let report = eval::eval_durations(&gen, utterances, seed)?;
    let seq = preprocess_tokens(text, &SubstitutionTable::default(), &gen.task)?;
    let lengths = length_histogram(&gen, &seq, draws, seed)?;
    let held = eval::held_out_prediction_loss(&gen, 20, 4, 16, seed)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("durations.csv"), report.csv())?;
        std::fs::write(out.join("length_histogram.csv"), histogram_csv(&lengths))?;
    }
    println!("{EVAL_SUMMARY_HEADER}");
    println!(
        "{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6}",
        report.utterances.len(),
        report.relative_errors.len(),
        report.median_relative_error,
        report.mean_relative_error,
        report.length_correlation,
        distinct_step_counts(&lengths),
        held.soft_dtw,
        held.l1
    );
    Ok(true)
}

pub fn dtw_eval(a: &Path, b: &Path, tau: f64, warp_penalty: f64, band: Option<usize>, path: bool) -> Result<bool> {
    let (gen, _) = read_spectrogram(a)?;
    let (gt, _) = read_spectrogram(b)?;
    let cfg = DtwConfig {
        warp_penalty,
        temperature: tau,
        band,
    };
    let soft = soft_dtw(&gen, &gt, &cfg)?;
    let hard = hard_dtw(&gen, &gt, &cfg)?;
    let steps = hard.path.unwrap_or_default();
    println!("soft_dtw,hard_dtw,path_length");
    println!("{:.9},{:.9},{}", soft.value, hard.value, steps.len());
    if path {
        println!("k,gen_idx,gt_idx");
        for (k, (i, j)) in steps.iter().enumerate() {
            println!("{k},{i},{j}");
        }
    }
    Ok(true)
}

fn front_end_for(sample_rate: u32) -> Result<MelParams> {
    let toy = MelParams::toy();
    let full = MelParams::default();
    if f64::from(sample_rate) == full.sample_rate {
        Ok(full)
    } else if f64::from(sample_rate) == toy.sample_rate {
        Ok(toy)
    } else {
        Err(Error::Config(format!(
            "no front end for {sample_rate} Hz, use {} or {}",
            full.sample_rate, toy.sample_rate
        )))
    }
}

pub fn spectrogram(wav: &Path, out: &Path, sample_rate: u32, mu_law: bool) -> Result<bool> {
    let params = front_end_for(sample_rate)?;
    let wave = read_wav(wav, sample_rate)?;
    let frontend = MelFrontend::new(params)?;
    let mel = frontend.compute(&wave.samples, mu_law)?;
    write_spectrogram(out, &mel.values, mel.params.sample_rate, mel.params.frame_step)?;
    println!("frames,bins,sample_rate,hop");
    println!(
        "{},{},{},{}",
        mel.num_frames(),
        mel.num_bins(),
        mel.params.sample_rate,
        mel.params.frame_step
    );
    Ok(true)
}

fn load_or_fresh(dir: Option<&Path>, seed: u64) -> Result<Generator> {
    match dir {
        Some(d) => checkpoint::load(d),
        None => {
            let task = ToyTask::default();
            let config = ModelConfig::toy(&task);
            Generator::new(task, config, seed)
        }
    }
}

pub fn align_demo(text: &str, draws: usize, dir: Option<&Path>, seed: u64) -> Result<bool> {
    let gen = load_or_fresh(dir, seed)?;
    let seq = preprocess_tokens(text, &SubstitutionTable::default(), &gen.task)?;
    let mut header = String::from("draw,total");
    for (t, &id) in seq.valid_ids().iter().enumerate() {
        let _ = write!(header, ",{t}:{}", id_symbol(id));
    }
    println!("{header}");
    let mut rng = substream(seed, 0xa1);
    for d in 0..draws {
        let cond = Conditioning::sample(&mut rng, 0);
        let out = gen
            .aligner
            .align(&gen.params, &seq, &cond, OutputWindow::Span { offset: 0, length: 1 })?;
        let mut row = format!("{d},{:.4}", out.predicted_total_length);
        for l in &out.token_lengths[..seq.true_length()] {
            let _ = write!(row, ",{l:.4}");
        }
        println!("{row}");
    }
    Ok(true)
}

pub fn gradcheck(seeds: u64, tolerance: f64) -> Result<bool> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let reports = check_all(&registry(), &seeds, tolerance)?;
    println!("{}", FdReport::CSV_HEADER);
    for r in &reports {
        println!("{}", r.csv_line());
    }
    Ok(reports.iter().all(|r| r.passed))
}

pub fn bench(dir: Option<&Path>, seconds: f64, batch: usize, runs: usize, seed: u64) -> Result<bool> {
    let gen = load_or_fresh(dir, seed)?;
    let report = eval::bench(&gen, seconds, batch, runs, seed)?;
    println!("{}", BenchReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(true)
}
