//! Waveform container, WAV decode/encode and random chunk cropping.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio samples with their sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum::<f64>()
            / self.samples.len() as f64
    }

    pub fn require_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate != expected {
            return Err(Error::SampleRate {
                expected,
                actual: self.sample_rate,
            });
        }
        Ok(())
    }
}

/// Decode a mono RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float samples.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Decode(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Decode(format!(
            "{}: unsupported channel count {}",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::Decode(format!(
                "{}: unsupported encoding {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::Decode(format!("{}: truncated or corrupt data: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

fn quantize(s: f32) -> i16 {
    (f64::from(s.clamp(-1.0, 1.0)) * 32768.0)
        .round()
        .clamp(-32768.0, 32767.0) as i16
}

/// Encode as 16-bit PCM mono.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Decode(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_err)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s)).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)
}

/// Duration bounds for random training crops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ChunkSpec {
    pub min_dur: f64,
    pub max_dur: f64,
}

impl ChunkSpec {
    pub fn new(min_dur: f64, max_dur: f64) -> Result<Self> {
        let spec = Self { min_dur, max_dur };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_dur > 0.0 && self.min_dur <= self.max_dur) {
            return Err(Error::Config(format!(
                "chunk range requires 0 < min_dur <= max_dur, got [{}, {}]",
                self.min_dur, self.max_dur
            )));
        }
        Ok(())
    }
}

/// Crop a contiguous slice whose duration is uniform over
/// `[min_dur, min(max_dur, duration)]` and whose start is uniform over the
/// valid offsets.
pub fn random_chunk<R: Rng + ?Sized>(w: &Waveform, spec: &ChunkSpec, rng: &mut R) -> Result<Waveform> {
    spec.validate()?;
    let sr = f64::from(w.sample_rate);
    let min_len = (spec.min_dur * sr - 1e-9).ceil().max(1.0) as usize;
    if w.len() < min_len {
        return Err(Error::ChunkTooShort {
            duration: w.duration(),
            min_dur: spec.min_dur,
        });
    }
    let max_len = ((spec.max_dur * sr + 1e-9).floor() as usize).clamp(min_len, w.len());
    let len = rng.gen_range(min_len..=max_len);
    let start = rng.gen_range(0..=w.len() - len);
    Ok(Waveform {
        samples: w.samples[start..start + len].to_vec(),
        sample_rate: w.sample_rate,
    })
}
