use std::path::Path;
use std::process::{Command, Output};

use softalign::signal::io::{read_spectrogram, write_wav, SampleFormat};
use softalign::signal::Waveform;

fn softalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softalign")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tone(path: &Path, rate: u32, hz: f64, seconds: f64) {
    let n = (f64::from(rate) * seconds) as usize;
    let samples = (0..n)
        .map(|i| 0.4 * (2.0 * std::f64::consts::PI * hz * i as f64 / f64::from(rate)).sin())
        .collect();
    write_wav(path, &Waveform::new(samples, rate), SampleFormat::Pcm16).unwrap();
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(softalign(&[]).status.code(), Some(2));
    assert_eq!(softalign(&["train-toy", "--steps", "x", "--out", "o"]).status.code(), Some(2));
    assert_eq!(softalign(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn validation_failures_exit_with_one() {
    let o = softalign(&["align-demo", "--text", "zq"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown symbol"));
    let o = softalign(&["eval-durations", "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn spectrogram_then_dtw_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (wav, a, b) = (dir.path().join("t.wav"), dir.path().join("a.f32"), dir.path().join("b.f32"));
    tone(&wav, 24_000, 440.0, 2.0);
    let o = softalign(&["spectrogram", wav.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "frames,bins,sample_rate,hop\n47,80,24000,1024\n");
    let (grid, header) = read_spectrogram(&a).unwrap();
    assert_eq!(grid.shape(), (47, 80));
    assert_eq!(header.get("hop"), Some("1024"));

    let o = softalign(&["spectrogram", wav.to_str().unwrap(), "--out", b.to_str().unwrap(), "--sample-rate", "4800"]);
    assert_eq!(o.status.code(), Some(1), "rate mismatch must be rejected");

    let o = softalign(&["dtw-eval", a.to_str().unwrap(), a.to_str().unwrap(), "--path", "--band", "3"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "soft_dtw,hard_dtw,path_length");
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[2], "47");
    assert_eq!(lines[2], "k,gen_idx,gt_idx");
    assert_eq!(lines[3], "0,0,0");
    assert_eq!(lines.len(), 3 + 47);
}

#[test]
fn train_eval_and_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "steps=6\nbatch=2\nloss=l1\n").unwrap();
    let o = softalign(&[
        "train-toy",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "4",
        "--stochastic-durations",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("steps,seconds,initial_pred,final_pred,final_length\n4,"));
    let metrics = std::fs::read_to_string(ckpt.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("step,adv,pred,length,total"));

    let evals = dir.path().join("eval");
    let o = softalign(&[
        "eval-durations",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--utterances",
        "5",
        "--z-draws",
        "16",
        "--out",
        evals.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("5,"));
    let hist = std::fs::read_to_string(evals.join("length_histogram.csv")).unwrap();
    assert!(hist.lines().count() > 1);
    assert!(evals.join("durations.csv").exists());

    let o = softalign(&["align-demo", "--text", "ae", "--z-draws", "3", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next().unwrap(), "draw,total,0:_,1:a,2:e,3:_");
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = softalign(&["bench", "--checkpoint", ckpt.to_str().unwrap(), "--runs", "3", "--seconds", "0.25"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("batch_size,utterance_seconds,runs,median_run_time_s,realtime_factor\n1,0.25,3,"));
}

#[test]
fn gradcheck_prints_one_line_per_op_and_seed() {
    let o = softalign(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("name,seed,max_rel_err,excluded_pct,pass"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), softalign::diffcheck::registry().len());
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}
