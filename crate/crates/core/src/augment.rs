//! Online raw-audio augmentation: additive noise, reverberation, frequency
//! and time masking, clipping. Each type fires independently with its own
//! probability and the chain runs in a fixed order.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::dsp::{fft_convolve, Stft};
use crate::error::{Error, Result};
use crate::rng::{rng_for, rng_indexed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub p_noise: f64,
    pub p_rir: f64,
    pub p_freq_mask: f64,
    pub p_time_mask: f64,
    pub p_clip: f64,
    pub snr_range_db: [f64; 2],
    pub freq_mask_width_range: [f64; 2],
    pub time_mask_frac_range: [f64; 2],
    pub clip_lower_pct_range: [f64; 2],
    pub clip_upper_pct_range: [f64; 2],
    /// Directory of noise WAVs; a synthetic pool is generated when absent.
    pub noise_dir: Option<String>,
    /// Directory of RIR WAVs; a synthetic pool is generated when absent.
    pub rir_dir: Option<String>,
    pub synthetic_pool_size: usize,
    pub rir_t60_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p_noise: 0.25,
            p_rir: 0.25,
            p_freq_mask: 0.25,
            p_time_mask: 0.25,
            p_clip: 0.25,
            snr_range_db: [0.0, 20.0],
            freq_mask_width_range: [50.0, 800.0],
            time_mask_frac_range: [0.0, 0.1],
            clip_lower_pct_range: [0.0, 40.0],
            clip_upper_pct_range: [60.0, 100.0],
            noise_dir: None,
            rir_dir: None,
            synthetic_pool_size: 8,
            rir_t60_range: [0.2, 0.8],
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::Config(format!(
            "{name} must satisfy {lo} <= low <= high <= {hi}, got {r:?}"
        )));
    }
    Ok(())
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_noise", self.p_noise),
            ("p_rir", self.p_rir),
            ("p_freq_mask", self.p_freq_mask),
            ("p_time_mask", self.p_time_mask),
            ("p_clip", self.p_clip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.snr_range_db[0] <= self.snr_range_db[1]) || self.snr_range_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("invalid snr_range_db {:?}", self.snr_range_db)));
        }
        check_range("freq_mask_width_range", self.freq_mask_width_range, 0.0, f64::MAX)?;
        check_range("time_mask_frac_range", self.time_mask_frac_range, 0.0, 1.0)?;
        check_range("clip_lower_pct_range", self.clip_lower_pct_range, 0.0, 100.0)?;
        check_range("clip_upper_pct_range", self.clip_upper_pct_range, 0.0, 100.0)?;
        if self.clip_lower_pct_range[1] >= self.clip_upper_pct_range[0] {
            return Err(Error::Config("clip lower percentile range must lie below the upper range".into()));
        }
        if !(self.rir_t60_range[0] > 0.0 && self.rir_t60_range[0] <= self.rir_t60_range[1]) {
            return Err(Error::Config(format!("invalid rir_t60_range {:?}", self.rir_t60_range)));
        }
        Ok(())
    }
}

/// Augmentation settings together with the loaded noise and RIR pools.
#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub config: AugmentConfig,
    pub noise_pool: Vec<Waveform>,
    pub rir_pool: Vec<Waveform>,
}

impl AugmentPolicy {
    pub fn new(config: AugmentConfig, noise_pool: Vec<Waveform>, rir_pool: Vec<Waveform>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            noise_pool,
            rir_pool,
        })
    }

    /// A policy that never changes its input.
    pub fn disabled() -> Self {
        Self {
            config: AugmentConfig {
                enabled: false,
                ..Default::default()
            },
            noise_pool: Vec::new(),
            rir_pool: Vec::new(),
        }
    }

    /// Load pools from the configured directories, or synthesize them.
    pub fn from_config(config: &AugmentConfig, sample_rate: u32, seed: u64) -> Result<Self> {
        config.validate()?;
        let noise_pool = match &config.noise_dir {
            Some(dir) => load_pool(Path::new(dir), sample_rate)?,
            None => (0..config.synthetic_pool_size)
                .map(|i| {
                    let mut rng = rng_indexed(seed, "noise-pool", i as u64);
                    synthetic_noise(2 * sample_rate as usize, sample_rate, i % 2 == 1, &mut rng)
                })
                .collect(),
        };
        let rir_pool = match &config.rir_dir {
            Some(dir) => load_pool(Path::new(dir), sample_rate)?,
            None => (0..config.synthetic_pool_size)
                .map(|i| {
                    let mut rng = rng_indexed(seed, "rir-pool", i as u64);
                    let [lo, hi] = config.rir_t60_range;
                    let t60 = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                    synthetic_rir(sample_rate, t60, &mut rng)
                })
                .collect(),
        };
        Self::new(config.clone(), noise_pool, rir_pool)
    }
}

/// Read every `.wav` in a directory, sorted by file name.
pub fn load_pool(dir: &Path, sample_rate: u32) -> Result<Vec<Waveform>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let w = read_wav(p)?;
            w.require_rate(sample_rate)?;
            Ok(w)
        })
        .collect()
}

/// White (or first-order lowpassed) Gaussian noise scaled to RMS 0.1.
pub fn synthetic_noise<R: Rng + ?Sized>(len: usize, sample_rate: u32, colored: bool, rng: &mut R) -> Waveform {
    let mut x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    if colored {
        let mut prev = 0.0;
        for v in &mut x {
            prev = 0.9 * prev + *v;
            *v = prev;
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let scale = if rms > 0.0 { 0.1 / rms } else { 0.0 };
    Waveform {
        samples: x.iter().map(|v| (v * scale).clamp(-1.0, 1.0) as f32).collect(),
        sample_rate,
    }
}

/// Exponentially decaying Gaussian noise with a unit direct-path impulse.
/// The envelope falls by 60 dB after `t60` seconds.
pub fn synthetic_rir<R: Rng + ?Sized>(sample_rate: u32, t60: f64, rng: &mut R) -> Waveform {
    let len = ((t60 * f64::from(sample_rate)).round() as usize).max(1);
    let decay = 3.0 * std::f64::consts::LN_10 / (t60 * f64::from(sample_rate));
    let mut samples: Vec<f32> = (0..len)
        .map(|n| {
            let g: f64 = StandardNormal.sample(rng);
            (0.3 * g * (-decay * n as f64).exp()).clamp(-1.0, 1.0) as f32
        })
        .collect();
    samples[0] = 1.0;
    Waveform {
        samples,
        sample_rate,
    }
}

fn same_rate(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::SampleRate {
            expected: a.sample_rate,
            actual: b.sample_rate,
        });
    }
    Ok(())
}

/// Repeat or crop `noise` to exactly `len` samples.
pub fn loop_to_length(noise: &[f32], len: usize) -> Vec<f32> {
    noise.iter().cycle().take(len).copied().collect()
}

/// Gain `g` such that `10 log10(signal_power / (g^2 noise_power)) = snr_db`.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Add `noise`, looped to the signal length, at the requested SNR.
pub fn mix_noise_at_snr(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    same_rate(w, noise)?;
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr must be finite, got {snr_db}")));
    }
    let looped = Waveform {
        samples: loop_to_length(&noise.samples, w.len()),
        sample_rate: w.sample_rate,
    };
    let ps = w.power();
    let pn = looped.power();
    if ps <= 0.0 {
        return Err(Error::InvalidArgument("signal has zero power".into()));
    }
    if pn <= 0.0 {
        return Err(Error::InvalidArgument("noise has zero power".into()));
    }
    let g = snr_gain(ps, pn, snr_db);
    Ok(Waveform {
        samples: w
            .samples
            .iter()
            .zip(&looped.samples)
            .map(|(&s, &n)| (f64::from(s) + g * f64::from(n)).clamp(-1.0, 1.0) as f32)
            .collect(),
        sample_rate: w.sample_rate,
    })
}

/// Convolve with a room impulse response, truncate to the input length and
/// rescale to the input's peak amplitude.
pub fn convolve_rir(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    same_rate(w, rir)?;
    if rir.is_empty() {
        return Err(Error::InvalidArgument("empty impulse response".into()));
    }
    let x: Vec<f64> = w.samples.iter().map(|&s| f64::from(s)).collect();
    let h: Vec<f64> = rir.samples.iter().map(|&s| f64::from(s)).collect();
    let mut y = fft_convolve(&x, &h);
    y.truncate(w.len());
    let peak_in = f64::from(w.peak());
    let peak_out = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak_out > 0.0 { peak_in / peak_out } else { 0.0 };
    Ok(Waveform {
        samples: y.iter().map(|v| (v * scale).clamp(-1.0, 1.0) as f32).collect(),
        sample_rate: w.sample_rate,
    })
}

/// STFT used by frequency masking: ~32 ms Hann frames, 75% overlap.
pub fn mask_stft(sample_rate: u32) -> Stft {
    let win = ((0.032 * f64::from(sample_rate)).round() as usize).next_power_of_two();
    Stft::new(win, win / 4)
}

/// Zero the STFT bins inside `[center - width/2, center + width/2]` and resynthesize.
pub fn freq_mask(w: &Waveform, center_hz: f64, width_hz: f64) -> Result<Waveform> {
    let nyquist = f64::from(w.sample_rate) / 2.0;
    let (lo, hi) = (center_hz - width_hz / 2.0, center_hz + width_hz / 2.0);
    if !(width_hz >= 0.0 && lo > 0.0 && hi < nyquist) {
        return Err(Error::InvalidArgument(format!(
            "mask band [{lo}, {hi}] Hz must lie within (0, {nyquist}) Hz"
        )));
    }
    let stft = mask_stft(w.sample_rate);
    let n = stft.fft_size();
    let bin_hz = f64::from(w.sample_rate) / n as f64;
    let masked: Vec<usize> = if width_hz > 0.0 {
        (0..=n / 2).filter(|&k| (k as f64 * bin_hz - center_hz).abs() <= width_hz / 2.0).collect()
    } else {
        Vec::new()
    };
    let x: Vec<f64> = w.samples.iter().map(|&s| f64::from(s)).collect();
    let y = stft.process(&x, |spec| {
        for &k in &masked {
            spec[k] = Default::default();
            if k != 0 && k != n / 2 {
                spec[n - k] = Default::default();
            }
        }
    });
    Ok(Waveform {
        samples: y.iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
        sample_rate: w.sample_rate,
    })
}

/// Zero the samples in `[start, start + span)` seconds.
pub fn time_mask(w: &Waveform, start: f64, span: f64) -> Result<Waveform> {
    let dur = w.duration();
    if !(start >= 0.0 && span >= 0.0 && start + span <= dur + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "time mask [{start}, {}] s outside duration {dur} s",
            start + span
        )));
    }
    let sr = f64::from(w.sample_rate);
    let a = ((start * sr).round() as usize).min(w.len());
    let b = (((start + span) * sr).round() as usize).min(w.len());
    let mut out = w.clone();
    out.samples[a..b].iter_mut().for_each(|s| *s = 0.0);
    Ok(out)
}

/// Linear-interpolated percentile of sorted data, `pct` in [0, 100].
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Clamp samples to the given percentiles of the input's amplitude
/// distribution and rescale back to the original peak.
pub fn clip_distort(w: &Waveform, lower_pct: f64, upper_pct: f64) -> Result<Waveform> {
    if !(0.0 <= lower_pct && lower_pct < upper_pct && upper_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "clip percentiles must satisfy 0 <= lower < upper <= 100, got ({lower_pct}, {upper_pct})"
        )));
    }
    let peak = f64::from(w.peak());
    if w.is_empty() || peak == 0.0 {
        return Ok(w.clone());
    }
    let mut sorted: Vec<f64> = w.samples.iter().map(|&s| f64::from(s)).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, lower_pct);
    let hi = percentile(&sorted, upper_pct);
    let clipped: Vec<f64> = w.samples.iter().map(|&s| f64::from(s).clamp(lo, hi)).collect();
    let clipped_peak = clipped.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if clipped_peak == 0.0 {
        return Ok(w.clone());
    }
    let scale = peak / clipped_peak;
    Ok(Waveform {
        samples: clipped.iter().map(|v| (v * scale) as f32).collect(),
        sample_rate: w.sample_rate,
    })
}

/// One applied augmentation and the parameters it was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Applied {
    Noise { pool_index: usize, snr_db: f64 },
    Rir { pool_index: usize },
    FreqMask { center_hz: f64, width_hz: f64 },
    TimeMask { start: f64, span: f64 },
    Clip { lower_pct: f64, upper_pct: f64 },
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Run the augmentation chain noise, RIR, frequency mask, time mask, clip.
/// Each stage fires with its own probability; the result is a pure function
/// of `(w, policy, seed)`.
pub fn apply_policy(w: &Waveform, policy: &AugmentPolicy, seed: u64) -> Result<(Waveform, Vec<Applied>)> {
    let cfg = &policy.config;
    let mut record = Vec::new();
    if !cfg.enabled {
        return Ok((w.clone(), record));
    }
    let mut rng = rng_for(seed, "augment");
    let mut out = w.clone();

    if rng.gen_bool(cfg.p_noise) {
        if policy.noise_pool.is_empty() {
            return Err(Error::Config("noise augmentation enabled with an empty noise pool".into()));
        }
        let pool_index = rng.gen_range(0..policy.noise_pool.len());
        let snr_db = uniform(&mut rng, cfg.snr_range_db);
        if out.power() > 0.0 {
            out = mix_noise_at_snr(&out, &policy.noise_pool[pool_index], snr_db)?;
            record.push(Applied::Noise { pool_index, snr_db });
        }
    }
    if rng.gen_bool(cfg.p_rir) {
        if policy.rir_pool.is_empty() {
            return Err(Error::Config("RIR augmentation enabled with an empty RIR pool".into()));
        }
        let pool_index = rng.gen_range(0..policy.rir_pool.len());
        out = convolve_rir(&out, &policy.rir_pool[pool_index])?;
        record.push(Applied::Rir { pool_index });
    }
    if rng.gen_bool(cfg.p_freq_mask) {
        let nyquist = f64::from(out.sample_rate) / 2.0;
        let width_hz = uniform(&mut rng, cfg.freq_mask_width_range).min(nyquist - 2.0);
        let center_hz = uniform(&mut rng, [width_hz / 2.0 + 1.0, nyquist - width_hz / 2.0 - 1.0]);
        out = freq_mask(&out, center_hz, width_hz)?;
        record.push(Applied::FreqMask { center_hz, width_hz });
    }
    if rng.gen_bool(cfg.p_time_mask) {
        let dur = out.duration();
        let span = uniform(&mut rng, cfg.time_mask_frac_range) * dur;
        let start = uniform(&mut rng, [0.0, dur - span]);
        out = time_mask(&out, start, span)?;
        record.push(Applied::TimeMask { start, span });
    }
    if rng.gen_bool(cfg.p_clip) {
        let lower_pct = uniform(&mut rng, cfg.clip_lower_pct_range);
        let upper_pct = uniform(&mut rng, cfg.clip_upper_pct_range);
        out = clip_distort(&out, lower_pct, upper_pct)?;
        record.push(Applied::Clip { lower_pct, upper_pct });
    }
    Ok((out, record))
}
