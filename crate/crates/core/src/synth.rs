//! Synthetic speaker corpus for end-to-end checks.
//!
//! Each speaker owns a small inventory of "phones", each a spectral envelope
//! of a few resonances. An utterance strings together short bursts of white
//! noise shaped by randomly chosen phones, separated by pauses, and passes
//! through a random per-utterance channel with slight resonance jitter.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::audio::{write_wav, Waveform};
use crate::dsp::FftPair;
use crate::error::{Error, Result};
use crate::rng::rng_indexed;
use crate::trainer::{write_manifest, ManifestEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterances per speaker used for training; the rest are held out.
    pub train_per_speaker: usize,
    pub sample_rate: u32,
    pub min_dur: f64,
    pub max_dur: f64,
    pub phones_per_speaker: usize,
    pub resonances_per_phone: usize,
    /// Relative jitter of resonance frequencies per utterance.
    pub jitter: f64,
    /// Channel gain variation across frequency, in dB.
    pub channel_db: f64,
    /// Nontarget trials drawn per held-out utterance.
    pub nontargets_per_utt: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 30,
            train_per_speaker: 5,
            sample_rate: 8000,
            min_dur: 6.0,
            max_dur: 8.0,
            phones_per_speaker: 4,
            resonances_per_phone: 3,
            jitter: 0.03,
            channel_db: 3.0,
            nontargets_per_utt: 12,
            seed: 0,
        }
    }
}

/// Paths of a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<ManifestEntry>,
    pub train_manifest: PathBuf,
    /// Held-out WAVs, named `<utt_id>.wav`.
    pub eval_dir: PathBuf,
    /// `enroll<TAB>test` pairs.
    pub trials: PathBuf,
    /// `enroll<TAB>test<TAB>label`.
    pub key: PathBuf,
    /// `utt<TAB>tel|mic` for the held-out utterances.
    pub src_meta: PathBuf,
    pub n_target: usize,
    pub n_nontarget: usize,
}

#[derive(Debug, Clone)]
struct Resonance {
    freq: f64,
    bandwidth: f64,
    gain: f64,
}

type Phone = Vec<Resonance>;

fn speaker_phones(cfg: &SynthConfig, speaker: usize) -> Vec<Phone> {
    let mut rng = rng_indexed(cfg.seed, "synth-speaker", speaker as u64);
    let nyq = f64::from(cfg.sample_rate) / 2.0;
    (0..cfg.phones_per_speaker)
        .map(|_| {
            (0..cfg.resonances_per_phone)
                .map(|_| Resonance {
                    // log-uniform between 200 Hz and 90% of Nyquist
                    freq: (rng.gen_range(200f64.ln()..(0.9 * nyq).ln())).exp(),
                    bandwidth: rng.gen_range(80.0..300.0),
                    gain: 10f64.powf(rng.gen_range(-10.0..0.0) / 20.0),
                })
                .collect()
        })
        .collect()
}

fn envelope(phone: &Phone, f: f64, jitter: f64, channel: &[(f64, f64, f64)]) -> f64 {
    let mut h = 0.02;
    for r in phone {
        let d = (f - r.freq * jitter) / r.bandwidth;
        h += r.gain * (-0.5 * d * d).exp();
    }
    let ch_db: f64 = channel
        .iter()
        .map(|&(c, w, db)| db * (-0.5 * ((f - c) / w).powi(2)).exp())
        .sum();
    h * 10f64.powf(ch_db / 20.0)
}

/// One utterance of `speaker`, deterministic in `(seed, speaker, index)`.
fn synth_utterance(cfg: &SynthConfig, phones: &[Phone], speaker: usize, index: usize) -> Waveform {
    let mut rng = rng_indexed(cfg.seed, "synth-utt", (speaker * 100_000 + index) as u64);
    let sr = f64::from(cfg.sample_rate);
    let nyq = sr / 2.0;
    let len = (rng.gen_range(cfg.min_dur..=cfg.max_dur) * sr) as usize;
    let jitter = 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter);
    let channel: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..nyq),
                rng.gen_range(300.0..1500.0),
                rng.gen_range(-cfg.channel_db..=cfg.channel_db),
            )
        })
        .collect();
    let level = 10f64.powf(rng.gen_range(-6.0..0.0) / 20.0);
    let white = Normal::new(0.0, 1.0).expect("unit normal");

    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        if !out.is_empty() && rng.gen_bool(0.12) {
            let n = (rng.gen_range(0.15..0.4) * sr) as usize;
            out.extend((0..n).map(|_| 1e-4 * white.sample(&mut rng)));
            continue;
        }
        let n = (rng.gen_range(0.06..0.2) * sr) as usize;
        let phone = &phones[rng.gen_range(0..phones.len())];
        let size = n.next_power_of_two();
        let fft = FftPair::new(size);
        let noise: Vec<f64> = (0..n).map(|_| white.sample(&mut rng)).collect();
        let mut spec = fft.spectrum(&noise);
        for (k, c) in spec.iter_mut().enumerate() {
            let f = k.min(size - k) as f64 * sr / size as f64;
            *c *= envelope(phone, f, jitter, &channel);
        }
        let shaped = fft.inverse_real(spec);
        let gain = level * 10f64.powf(rng.gen_range(-3.0..3.0) / 20.0);
        // 10 ms raised-cosine ramps
        let ramp = ((0.01 * sr) as usize).min(n / 2).max(1);
        for (i, &x) in shaped[..n].iter().enumerate() {
            let edge = i.min(n - 1 - i);
            let g = if edge < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            out.push(gain * g * x);
        }
    }
    out.truncate(len);
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let norm = if peak > 0.0 { 0.5 * level / peak } else { 1.0 };
    let samples = out.iter().map(|&x| (x * norm) as f32).collect();
    Waveform::new(samples, cfg.sample_rate).expect("finite samples")
}

/// Writes the corpus under `dir`: `train/`, `eval/`, `train.tsv`,
/// `trials.tsv`, `key.tsv` and `eval_src.tsv`.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthCorpus> {
    if cfg.n_speakers < 2 || cfg.train_per_speaker == 0 || cfg.train_per_speaker + 2 > cfg.utts_per_speaker {
        return Err(Error::InvalidArgument(
            "synthetic corpus needs >= 2 speakers, >= 1 training and >= 2 held-out utterances each".into(),
        ));
    }
    if cfg.phones_per_speaker == 0 || !(cfg.min_dur > 0.0 && cfg.max_dur >= cfg.min_dur) {
        return Err(Error::InvalidArgument("invalid synthetic corpus shape".into()));
    }
    let train_dir = dir.join("train");
    let eval_dir = dir.join("eval");
    for d in [&train_dir, &eval_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let speaker_id = |s: usize| format!("spk{s:02}");
    let utt_id = |s: usize, u: usize| format!("spk{s:02}_u{u:02}");

    let jobs: Vec<(usize, usize)> = (0..cfg.n_speakers)
        .flat_map(|s| (0..cfg.utts_per_speaker).map(move |u| (s, u)))
        .collect();
    let inventories: Vec<Vec<Phone>> = (0..cfg.n_speakers).map(|s| speaker_phones(cfg, s)).collect();
    jobs.par_iter()
        .map(|&(s, u)| {
            let w = synth_utterance(cfg, &inventories[s], s, u);
            let sub = if u < cfg.train_per_speaker { &train_dir } else { &eval_dir };
            write_wav(&w, sub.join(format!("{}.wav", utt_id(s, u))))
        })
        .collect::<Result<Vec<()>>>()?;

    let train: Vec<ManifestEntry> = jobs
        .iter()
        .filter(|&&(_, u)| u < cfg.train_per_speaker)
        .map(|&(s, u)| ManifestEntry {
            utt_id: utt_id(s, u),
            path: train_dir.join(format!("{}.wav", utt_id(s, u))),
            speaker: speaker_id(s),
        })
        .collect();
    let train_manifest = dir.join("train.tsv");
    write_manifest(&train, &train_manifest)?;

    let held: Vec<(usize, usize)> = jobs.iter().copied().filter(|&(_, u)| u >= cfg.train_per_speaker).collect();
    let mut trial_lines = String::new();
    let mut key_lines = String::new();
    let (mut n_target, mut n_nontarget) = (0, 0);
    let mut push = |a: (usize, usize), b: (usize, usize), target: bool| {
        let (e, t) = (utt_id(a.0, a.1), utt_id(b.0, b.1));
        trial_lines.push_str(&format!("{e}\t{t}\n"));
        key_lines.push_str(&format!("{e}\t{t}\t{}\n", if target { "target" } else { "nontarget" }));
    };
    for (i, &a) in held.iter().enumerate() {
        for &b in held[i + 1..].iter().filter(|b| b.0 == a.0) {
            push(a, b, true);
            n_target += 1;
        }
    }
    let mut rng = rng_indexed(cfg.seed, "synth-trials", 0);
    let mut used = std::collections::HashSet::new();
    for &a in &held {
        let mut drawn = 0;
        while drawn < cfg.nontargets_per_utt {
            let b = held[rng.gen_range(0..held.len())];
            if b.0 == a.0 {
                continue;
            }
            let pair = if a < b { (a, b) } else { (b, a) };
            if used.insert(pair) {
                push(pair.0, pair.1, false);
                n_nontarget += 1;
            }
            drawn += 1;
        }
    }
    let trials = dir.join("trials.tsv");
    let key = dir.join("key.tsv");
    let src_meta = dir.join("eval_src.tsv");
    let src: String = held
        .iter()
        .map(|&(s, u)| format!("{}\t{}\n", utt_id(s, u), if u % 2 == 0 { "tel" } else { "mic" }))
        .collect();
    for (p, body) in [(&trials, &trial_lines), (&key, &key_lines), (&src_meta, &src)] {
        std::fs::write(p, body).map_err(|e| Error::io(p, e))?;
    }
    Ok(SynthCorpus {
        train,
        train_manifest,
        eval_dir,
        trials,
        key,
        src_meta,
        n_target,
        n_nontarget,
    })
}
