//! WAV files and raw float32 dumps.
//!
//! A dump is a file of little-endian `f32` values in row-major order next to
//! a text sidecar (`<file>.hdr`) holding `key=value` pairs separated by `;`,
//! e.g. `shape=47,80;sr=24000;hop=1024`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::Waveform;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

/// Reads a mono WAV file; a sample rate other than `expected_rate` is an error.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(bad(format!("{} channels, only mono is supported", spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(bad(format!(
            "sample rate {} Hz, expected {expected_rate} Hz",
            spec.sample_rate
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => return Err(bad(format!("unsupported sample format {fmt:?}/{bits} bit"))),
    };
    Ok(Waveform::new(samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, wave: &Waveform, format: SampleFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        match format {
            SampleFormat::Pcm16 => {
                writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?
            }
            SampleFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Sidecar path for a dump file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".hdr");
    PathBuf::from(name)
}

/// Header of a raw float32 dump.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DumpHeader {
    pub shape: Vec<usize>,
    pub extra: BTreeMap<String, String>,
}

impl DumpHeader {
    pub fn with_shape(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            extra: BTreeMap::new(),
        }
    }

    pub fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn render(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(ToString::to_string).collect();
        let mut parts = vec![format!("shape={}", shape.join(","))];
        // sr and hop first, as in `shape=T,F;sr=...;hop=...`
        for key in ["sr", "hop"] {
            if let Some(v) = self.extra.get(key) {
                parts.push(format!("{key}={v}"));
            }
        }
        for (k, v) in &self.extra {
            if k != "sr" && k != "hop" {
                parts.push(format!("{k}={v}"));
            }
        }
        parts.join(";")
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut header = DumpHeader::default();
        let mut saw_shape = false;
        for part in text.trim().split(';').filter(|s| !s.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, found {part:?}")))?;
            if key == "shape" {
                header.shape = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dimension {d:?}"))))
                    .collect::<Result<_>>()?;
                saw_shape = true;
            } else {
                header.extra.insert(key.to_string(), value.to_string());
            }
        }
        if !saw_shape {
            return Err(bad("missing shape".into()));
        }
        Ok(header)
    }
}

pub fn write_dump(path: &Path, values: &[f64], header: &DumpHeader) -> Result<()> {
    if header.len() != values.len() {
        return Err(Error::Shape(format!(
            "header shape {:?} holds {} values, got {}",
            header.shape,
            header.len(),
            values.len()
        )));
    }
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), header.render() + "\n")?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<(Vec<f64>, DumpHeader)> {
    let header = DumpHeader::parse(&fs::read_to_string(sidecar_path(path))?, path)?;
    let bytes = fs::read(path)?;
    if bytes.len() != header.len() * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes on disk, header shape {:?} needs {}",
                bytes.len(),
                header.shape,
                header.len() * 4
            ),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok((values, header))
}

/// Writes a `T x F` spectrogram dump with `sr` and `hop` in the sidecar.
pub fn write_spectrogram(path: &Path, values: &Grid, sample_rate: f64, hop: usize) -> Result<()> {
    let header = DumpHeader::with_shape(&[values.rows(), values.cols()])
        .set("sr", sample_rate)
        .set("hop", hop);
    write_dump(path, values.as_slice(), &header)
}

pub fn read_spectrogram(path: &Path) -> Result<(Grid, DumpHeader)> {
    let (values, header) = read_dump(path)?;
    if header.shape.len() != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("spectrogram needs a 2-D shape, found {:?}", header.shape),
        });
    }
    let grid = Grid::from_vec(header.shape[0], header.shape[1], values)?;
    Ok((grid, header))
}
