//! Saving and restoring trained toy generators.
//!
//! A checkpoint is a directory with three files:
//!
//! * `config.txt`: `key=value` lines describing the task and the model,
//! * `params.bin`: every tensor as little-endian `f64`, in manifest order,
//! * `manifest.txt`: a format line, then one `name dims` line per tensor,
//!   where `dims` is comma-separated.
//!
//! Standing normalisation statistics, when present, are stored as extra
//! tensors named `standing/{layer}/mean` and `standing/{layer}/var`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::aligner::AlignerConfig;
use crate::error::{Error, Result};
use crate::nn::{ChannelStats, NormMode, Tensor};
use crate::signal::MelParams;

use super::decoder::DecoderConfig;
use super::generator::{Generator, ModelConfig};
use super::task::ToyTask;

const FORMAT: &str = "softalign-checkpoint 1";

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; whitespace around keys and values is trimmed.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Typed lookup in a parsed key-value map.
pub struct Settings<'a>(pub &'a BTreeMap<String, String>);

impl Settings<'_> {
    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .0
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw: String = self.get(key)?;
        raw.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad list entry {s:?} for {key}")))
            })
            .collect()
    }
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn norm_name(mode: NormMode) -> &'static str {
    match mode {
        NormMode::Instance => "instance",
        NormMode::Batch => "batch",
    }
}

fn parse_norm(s: &str) -> Result<NormMode> {
    match s {
        "instance" => Ok(NormMode::Instance),
        "batch" => Ok(NormMode::Batch),
        other => Err(Error::Config(format!("unknown norm mode {other:?}"))),
    }
}

pub fn config_text(task: &ToyTask, model: &ModelConfig) -> String {
    let m = &task.mel;
    let a = &model.aligner;
    let d = &model.decoder;
    let lines = [
        ("task.num_tones", task.num_tones.to_string()),
        ("task.sample_rate", task.sample_rate.to_string()),
        ("task.aligner_rate", task.aligner_rate.to_string()),
        ("task.base_frequency", task.base_frequency.to_string()),
        ("task.frequency_step", task.frequency_step.to_string()),
        ("task.base_duration", task.base_duration.to_string()),
        ("task.duration_step", task.duration_step.to_string()),
        ("task.silence_duration", task.silence_duration.to_string()),
        ("task.amplitude", task.amplitude.to_string()),
        ("task.rate_jitter", task.rate_jitter.to_string()),
        ("task.min_tokens", task.min_tokens.to_string()),
        ("task.max_tokens", task.max_tokens.to_string()),
        ("task.padded_length", task.padded_length.to_string()),
        ("mel.frame_length", m.frame_length.to_string()),
        ("mel.frame_step", m.frame_step.to_string()),
        ("mel.fft_length", m.fft_length.to_string()),
        ("mel.num_bins", m.num_bins.to_string()),
        ("mel.sample_rate", m.sample_rate.to_string()),
        ("mel.lower_edge_hz", m.lower_edge_hz.to_string()),
        ("mel.upper_edge_hz", m.upper_edge_hz.to_string()),
        ("mel.pad_end", m.pad_end.to_string()),
        ("mel.log_scale", m.log_scale.to_string()),
        ("mel.mu", m.mu.to_string()),
        ("mel.max_jitter", m.max_jitter.to_string()),
        ("aligner.num_speakers", a.num_speakers.to_string()),
        ("aligner.channels", a.channels.to_string()),
        ("aligner.blocks", a.blocks.to_string()),
        ("aligner.kernel", a.kernel.to_string()),
        ("aligner.sigma2", a.sigma2.to_string()),
        ("aligner.norm_mode", norm_name(a.norm_mode).to_string()),
        ("aligner.cond_gain", a.cond_gain.to_string()),
        ("aligner.initial_length", a.initial_length.to_string()),
        ("aligner.residual_gain", a.residual_gain.to_string()),
        ("decoder.factors", join(&d.factors)),
        ("decoder.kernels", join(&d.kernels)),
        ("decoder.hidden", join(&d.hidden)),
        ("decoder.carriers", join(&d.carriers)),
        ("decoder.output_gain", d.output_gain.to_string()),
    ];
    lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_config(text: &str) -> Result<(ToyTask, ModelConfig)> {
    let map = parse_key_values(text)?;
    let s = Settings(&map);
    let mel = MelParams {
        frame_length: s.get("mel.frame_length")?,
        frame_step: s.get("mel.frame_step")?,
        fft_length: s.get("mel.fft_length")?,
        num_bins: s.get("mel.num_bins")?,
        sample_rate: s.get("mel.sample_rate")?,
        lower_edge_hz: s.get("mel.lower_edge_hz")?,
        upper_edge_hz: s.get("mel.upper_edge_hz")?,
        pad_end: s.get("mel.pad_end")?,
        log_scale: s.get("mel.log_scale")?,
        mu: s.get("mel.mu")?,
        max_jitter: s.get("mel.max_jitter")?,
    };
    let task = ToyTask {
        num_tones: s.get("task.num_tones")?,
        sample_rate: s.get("task.sample_rate")?,
        aligner_rate: s.get("task.aligner_rate")?,
        base_frequency: s.get("task.base_frequency")?,
        frequency_step: s.get("task.frequency_step")?,
        base_duration: s.get("task.base_duration")?,
        duration_step: s.get("task.duration_step")?,
        silence_duration: s.get("task.silence_duration")?,
        amplitude: s.get("task.amplitude")?,
        rate_jitter: s.get("task.rate_jitter")?,
        min_tokens: s.get("task.min_tokens")?,
        max_tokens: s.get("task.max_tokens")?,
        padded_length: s.get("task.padded_length")?,
        mel,
    };
    let aligner = AlignerConfig {
        vocab_size: task.vocab_size(),
        num_speakers: s.get("aligner.num_speakers")?,
        channels: s.get("aligner.channels")?,
        blocks: s.get("aligner.blocks")?,
        kernel: s.get("aligner.kernel")?,
        sigma2: s.get("aligner.sigma2")?,
        norm_mode: parse_norm(&s.get::<String>("aligner.norm_mode")?)?,
        cond_gain: s.get("aligner.cond_gain")?,
        initial_length: s.get("aligner.initial_length")?,
        residual_gain: s.get("aligner.residual_gain")?,
    };
    let decoder = DecoderConfig {
        in_channels: aligner.channels,
        factors: s.list("decoder.factors")?,
        kernels: s.list("decoder.kernels")?,
        hidden: s.list("decoder.hidden")?,
        carriers: s.list("decoder.carriers")?,
        sample_rate: task.sample_rate as f64,
        output_gain: s.get("decoder.output_gain")?,
    };
    Ok((task, ModelConfig { aligner, decoder }))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save(gen: &Generator, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), config_text(&gen.task, &gen.config))?;
    let mut tensors: Vec<(String, Tensor)> = gen
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect();
    if let Some(stats) = &gen.aligner.standing {
        for (i, s) in stats.iter().enumerate() {
            for (kind, v) in [("mean", &s.mean), ("var", &s.var)] {
                tensors.push((
                    format!("standing/{i}/{kind}"),
                    Tensor {
                        shape: vec![v.len()],
                        data: v.clone(),
                    },
                ));
            }
        }
    }
    let mut manifest = format!("{FORMAT}\n");
    let mut bytes = Vec::new();
    for (name, t) in &tensors {
        manifest.push_str(&format!("{name} {}\n", join(&t.shape)));
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("params.bin"), bytes)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Generator> {
    let (task, model) = parse_config(&fs::read_to_string(dir.join("config.txt"))?)?;
    let mut gen = Generator::new(task, model, 0)?;
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path)?;
    let mut lines = manifest.lines();
    if lines.next() != Some(FORMAT) {
        return Err(bad(&manifest_path, format!("first line is not {FORMAT:?}")));
    }
    let bin_path = dir.join("params.bin");
    let bytes = fs::read(&bin_path)?;
    if bytes.len() % 8 != 0 {
        return Err(bad(&bin_path, "length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut offset = 0;
    let mut standing: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut loaded = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (name, dims) = line
            .rsplit_once(' ')
            .ok_or_else(|| bad(&manifest_path, format!("malformed line {line:?}")))?;
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(&manifest_path, format!("bad shape in {line:?}")))?;
        let n: usize = shape.iter().product();
        if offset + n > values.len() {
            return Err(bad(&bin_path, format!("too short for tensor {name}")));
        }
        let data = values[offset..offset + n].to_vec();
        offset += n;
        if let Some(rest) = name.strip_prefix("standing/") {
            let (layer, kind) = rest
                .split_once('/')
                .ok_or_else(|| bad(&manifest_path, format!("bad standing entry {name}")))?;
            let layer: usize = layer
                .parse()
                .map_err(|_| bad(&manifest_path, format!("bad standing layer in {name}")))?;
            let slot = standing.entry(layer).or_default();
            match kind {
                "mean" => slot.0 = data,
                "var" => slot.1 = data,
                _ => return Err(bad(&manifest_path, format!("bad standing entry {name}"))),
            }
        } else {
            gen.params.load(name, Tensor { shape, data })?;
            loaded += 1;
        }
    }
    if offset != values.len() {
        return Err(bad(&bin_path, "trailing data after the last tensor"));
    }
    if loaded != gen.params.len() {
        return Err(bad(
            &manifest_path,
            format!("{loaded} parameters stored, model has {}", gen.params.len()),
        ));
    }
    if !standing.is_empty() {
        if standing.len() != gen.aligner.num_norm_layers() {
            return Err(bad(&manifest_path, "standing statistics do not cover every layer"));
        }
        gen.aligner.standing = Some(
            standing
                .into_values()
                .map(|(mean, var)| ChannelStats { mean, var })
                .collect(),
        );
    }
    Ok(gen)
}
