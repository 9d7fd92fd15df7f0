//! Log Mel-filterbank features, sliding mean normalization and an energy VAD.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::dsp::{hann, FftPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Mfb,
    EncoderLatent,
    HiddenState,
}

impl FeatureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureKind::Mfb => "mfb",
            FeatureKind::EncoderLatent => "encoder-latent",
            FeatureKind::HiddenState => "hidden-state",
        }
    }
}

/// Time-major matrix of frame vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `T x F`
    pub frames: Array2<f64>,
    pub frame_shift: f64,
    pub frame_length: f64,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>, frame_shift: f64, frame_length: f64, kind: FeatureKind) -> Self {
        Self {
            frames,
            frame_shift,
            frame_length,
            kind,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(|v| v.is_finite())
    }

    /// Keep only the frames flagged in `mask`.
    pub fn select(&self, mask: &VadMask) -> Result<FeatureSequence> {
        if mask.0.len() != self.num_frames() {
            return Err(Error::Shape(format!(
                "mask of length {} for {} frames",
                mask.0.len(),
                self.num_frames()
            )));
        }
        let keep: Vec<usize> = mask.0.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        Ok(FeatureSequence {
            frames: self.frames.select(Axis(0), &keep),
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MfbConfig {
    pub n_mels: usize,
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_shift: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Sliding mean-normalization window in seconds.
    pub norm_window: f64,
}

impl Default for MfbConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            frame_length: 0.025,
            frame_shift: 0.010,
            f_min: 20.0,
            f_max: 3700.0,
            log_floor: 1e-10,
            norm_window: 3.0,
        }
    }
}

impl MfbConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(Error::Config(format!(
                "mel band requires 0 <= f_min < f_max, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if self.f_max > nyquist {
            return Err(Error::Config(format!(
                "f_max {} Hz exceeds Nyquist {} Hz",
                self.f_max, nyquist
            )));
        }
        if !(self.frame_length > 0.0 && self.frame_shift > 0.0) {
            return Err(Error::Config("frame length and shift must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if !(self.norm_window > 0.0) {
            return Err(Error::Config("norm_window must be positive".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length * f64::from(sample_rate)).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift * f64::from(sample_rate)).round() as usize
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Array2<f64> {
    let lo = hz_to_mel(f_min);
    let hi = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = f64::from(sample_rate) / n_fft as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - left) / (center - left);
        let down = (right - f) / (right - center);
        up.min(down).max(0.0)
    })
}

/// Log Mel-filterbank energies: Hann window, no pre-emphasis, FFT size the
/// next power of two at or above the window length.
pub fn compute_mfb(w: &Waveform, cfg: &MfbConfig) -> Result<FeatureSequence> {
    cfg.validate(w.sample_rate)?;
    let win = cfg.window_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    if win == 0 || hop == 0 {
        return Err(Error::Config("frame length or shift rounds to zero samples".into()));
    }
    let n = w.len();
    let t = if n >= win { (n - win) / hop + 1 } else { 0 };
    let n_fft = win.next_power_of_two();
    let bank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate, cfg.f_min, cfg.f_max);
    let window = hann(win);
    let fft = FftPair::new(n_fft);
    let mut frames = Array2::zeros((t, cfg.n_mels));
    let mut buf = vec![0.0; win];
    for (i, mut row) in frames.outer_iter_mut().enumerate() {
        let start = i * hop;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = f64::from(w.samples[start + j]) * window[j];
        }
        let spec = fft.spectrum(&buf);
        let power: Vec<f64> = spec[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (m, out) in row.iter_mut().enumerate() {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            *out = (e + cfg.log_floor).ln();
        }
    }
    Ok(FeatureSequence::new(frames, cfg.frame_shift, cfg.frame_length, FeatureKind::Mfb))
}

/// Subtract from each frame the mean of a centered window of frames
/// (truncated at the edges). Sequences not longer than the window get the
/// global mean removed.
pub fn sliding_mean_normalize(f: &FeatureSequence, window: f64) -> FeatureSequence {
    let t = f.num_frames();
    let mut out = f.clone();
    if t == 0 {
        return out;
    }
    if t as f64 * f.frame_shift <= window {
        let mean = f.frames.mean_axis(Axis(0)).expect("non-empty");
        out.frames -= &mean;
        return out;
    }
    let width = (window / f.frame_shift).round().max(1.0) as usize;
    let half = width / 2;
    let dim = f.dim();
    // prefix[i] = sum of frames[..i]
    let mut prefix = Array2::<f64>::zeros((t + 1, dim));
    for i in 0..t {
        let next = &prefix.row(i) + &f.frames.row(i);
        prefix.row_mut(i + 1).assign(&next);
    }
    for i in 0..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(t);
        let count = (hi - lo) as f64;
        let mean = (&prefix.row(hi) - &prefix.row(lo)) / count;
        let centered = &f.frames.row(i) - &mean;
        out.frames.row_mut(i).assign(&centered);
    }
    out
}

/// Per-frame speech flags aligned with a feature sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VadMask(pub Vec<bool>);

impl VadMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_speech(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

/// Frame log-energy: log-sum-exp over the mel bins of an un-normalized MFB frame.
pub fn frame_log_energy(frame: ndarray::ArrayView1<f64>) -> f64 {
    let max = frame.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + frame.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Energy-threshold VAD on un-normalized MFB features.
///
/// A frame is speech when its log-energy exceeds both the utterance maximum
/// minus `offset_db` and twice the all-floor energy `n_mels * log_floor`, so
/// digital silence is never speech.
pub fn energy_vad(f: &FeatureSequence, offset_db: f64, log_floor: f64) -> VadMask {
    let energies: Vec<f64> = f.frames.outer_iter().map(frame_log_energy).collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let offset_nats = offset_db * std::f64::consts::LN_10 / 10.0;
    let silence = (2.0 * f.dim() as f64 * log_floor).ln();
    VadMask(
        energies
            .iter()
            .map(|&e| e > max - offset_nats && e > silence)
            .collect(),
    )
}

/// Concatenate the samples covered by at least one speech frame.
pub fn apply_vad(w: &Waveform, mask: &VadMask, cfg: &MfbConfig) -> Waveform {
    let win = cfg.window_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    let mut keep = vec![false; w.len()];
    for (i, &speech) in mask.0.iter().enumerate() {
        if speech {
            let start = i * hop;
            let end = (start + win).min(w.len());
            keep[start..end].iter_mut().for_each(|k| *k = true);
        }
    }
    Waveform {
        samples: w
            .samples
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&s, _)| s)
            .collect(),
        sample_rate: w.sample_rate,
    }
}
