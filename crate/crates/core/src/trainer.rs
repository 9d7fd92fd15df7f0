//! Head training: AAM-Softmax with SGD + momentum, a two-phase linear
//! one-cycle learning rate, and a chunk-length curriculum.
//!
//! Every random draw comes from a stream derived from the root seed and the
//! sample's position, and per-sample gradients are summed in batch order, so
//! results do not depend on the thread count.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{random_chunk, read_wav, ChunkSpec, Waveform};
use crate::augment::{apply_policy, AugmentPolicy};
use crate::checkpoint::Model;
use crate::config::PipelineConfig;
use crate::encoder::{init_encoder, EncoderWeights};
use crate::error::{Error, Result};
use crate::head::{init_head, sample_loss_and_grad, HeadConfig, HeadInput, HeadWeights};
use crate::pipeline::{features, prepare_utterance};
use crate::rng::{derive_indexed, derive_seed, rng_for, rng_indexed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs on short chunks.
    pub epochs: usize,
    /// Further epochs on long chunks.
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub stage1_chunk: ChunkSpec,
    pub stage2_chunk: ChunkSpec,
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    /// Fraction of all steps spent ramping up to `lr_max`.
    pub warmup_frac: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub freeze_encoder: bool,
    /// Apply the augmentation policy to training chunks.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            stage2_epochs: 0,
            batch_size: 4,
            stage1_chunk: ChunkSpec {
                min_dur: 4.0,
                max_dur: 6.0,
            },
            stage2_chunk: ChunkSpec {
                min_dur: 12.0,
                max_dur: 18.0,
            },
            lr_start: 2.5e-4,
            lr_max: 5e-3,
            lr_final: 1e-5,
            warmup_frac: 0.3,
            momentum: 0.9,
            weight_decay: 0.0,
            freeze_encoder: true,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs + self.stage2_epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.stage1_chunk.validate()?;
        self.stage2_chunk.validate()?;
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_max", self.lr_max),
            ("lr_final", self.lr_final),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!("train.warmup_frac must be in (0, 1), got {}", self.warmup_frac)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps`: linear from `lr_start` to
/// `lr_max` over the warmup, then linear down to `lr_final`.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("one-cycle schedule needs total_steps >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total_steps}")));
    }
    let peak = cfg.warmup_frac * total_steps as f64;
    let s = step as f64;
    Ok(if s <= peak {
        cfg.lr_start + (s / peak) * (cfg.lr_max - cfg.lr_start)
    } else {
        cfg.lr_max + ((s - peak) / (total_steps as f64 - peak)) * (cfg.lr_final - cfg.lr_max)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub speaker: String,
}

/// Reads `utt_id<TAB>path<TAB>speaker`. Relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 || f.iter().any(|s| s.is_empty()) {
            return Err(err("expected utt_id<TAB>path<TAB>speaker".into()));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(err(format!("duplicate utterance id {}", f[0])));
        }
        out.push(ManifestEntry {
            utt_id: f[0].into(),
            path: base.join(f[1]),
            speaker: f[2].into(),
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.utt_id, e.path.display(), e.speaker));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Mutable optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub running_loss: f64,
    pub weights: HeadWeights,
    pub velocity: HeadWeights,
}

impl TrainState {
    pub fn new(weights: HeadWeights) -> Self {
        Self {
            step: 0,
            lr: 0.0,
            running_loss: 0.0,
            velocity: weights.zeros_like(),
            weights,
        }
    }

    /// `v = mu v + g + wd theta; theta -= lr v`.
    pub fn sgd_step(&mut self, grads: &HeadWeights, lr: f64, cfg: &TrainConfig) {
        self.velocity.scale(cfg.momentum);
        self.velocity.add_scaled(grads, 1.0);
        if cfg.weight_decay > 0.0 {
            let snapshot = self.weights.clone();
            self.velocity.add_scaled(&snapshot, cfg.weight_decay);
        }
        self.weights.add_scaled(&self.velocity, -lr);
        self.lr = lr;
        self.step += 1;
    }
}

/// Mean loss and mean gradient over a batch of `(frames, label)` pairs.
pub fn batch_gradient(batch: &[(Array2<f64>, usize)], w: &HeadWeights, cfg: &HeadConfig) -> Result<(f64, HeadWeights)> {
    let per: Vec<(f64, HeadWeights)> = batch
        .par_iter()
        .map(|(x, y)| sample_loss_and_grad(&x.view(), *y, w, cfg).map(|g| (g.loss, g.grads)))
        .collect::<Result<_>>()?;
    reduce(per, w)
}

fn reduce(per: Vec<(f64, HeadWeights)>, w: &HeadWeights) -> Result<(f64, HeadWeights)> {
    let n = per.len() as f64;
    let mut total = w.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    total.scale(1.0 / n);
    let loss = loss / n;
    if !loss.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    Ok((loss, total))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepRecord>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives one JSON object per optimizer step.
    pub log: Option<&'a mut dyn Write>,
    /// Receives `epoch_<n>.svck` after every epoch.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Loads, checks and VAD-filters every manifest entry.
pub fn load_training_set(manifest: &[ManifestEntry], cfg: &PipelineConfig) -> Result<(Vec<(Waveform, usize)>, Vec<String>)> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("empty training manifest".into()));
    }
    let mut speakers: Vec<String> = manifest.iter().map(|e| e.speaker.clone()).collect();
    speakers.sort();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 speakers, manifest has {}",
            speakers.len()
        )));
    }
    let data = manifest
        .par_iter()
        .map(|e| {
            let w = read_wav(&e.path)?;
            let w = prepare_utterance(w, cfg).map_err(|err| match err {
                Error::Degenerate(m) => Error::Degenerate(format!("{}: {m}", e.utt_id)),
                other => other,
            })?;
            let label = speakers.binary_search(&e.speaker).expect("speaker listed");
            Ok((w, label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((data, speakers))
}

pub fn train(manifest: &[ManifestEntry], cfg: &PipelineConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (data, speakers) = load_training_set(manifest, cfg)?;
    train_on(&data, speakers, cfg, opts)
}

/// Trains on already-prepared `(waveform, class)` pairs.
pub fn train_on(
    data: &[(Waveform, usize)],
    speakers: Vec<String>,
    cfg: &PipelineConfig,
    mut opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let seed = cfg.seed;
    let head_cfg = cfg.resolved_head(speakers.len());
    head_cfg.validate()?;
    if let Some(&(_, bad)) = data.iter().find(|(_, y)| *y >= head_cfg.n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {} classes",
            head_cfg.n_classes
        )));
    }
    let encoder: Option<EncoderWeights> = match head_cfg.input {
        HeadInput::Encoder => Some(init_encoder(&cfg.encoder, &mut rng_for(seed, "encoder"))?),
        HeadInput::Mfb => None,
    };
    let head = init_head(&head_cfg, &mut rng_for(seed, "head"))?;
    let policy = if tc.augment && cfg.augment.enabled {
        AugmentPolicy::from_config(&cfg.augment, cfg.audio.sample_rate, derive_seed(seed, "augment-pool"))?
    } else {
        AugmentPolicy::disabled()
    };

    let n = data.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let n_epochs = tc.epochs + tc.stage2_epochs;
    let total_steps = steps_per_epoch * n_epochs;
    let mut state = TrainState::new(head);
    let mut steps = Vec::with_capacity(total_steps);
    let mut epoch_losses = Vec::with_capacity(n_epochs);
    let mut model = Model::new(cfg.clone(), head_cfg.clone(), speakers, encoder, state.weights.clone());

    for epoch in 0..n_epochs {
        let spec = if epoch < tc.epochs { tc.stage1_chunk } else { tc.stage2_chunk };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_indexed(seed, "shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let per: Vec<(f64, HeadWeights)> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let sample_id = (epoch * n + b * tc.batch_size + j) as u64;
                    let (wave, label) = &data[idx];
                    let chunk = training_chunk(wave, &spec, seed, sample_id)?;
                    let (chunk, _) = apply_policy(&chunk, &policy, derive_indexed(seed, "augment", sample_id))?;
                    let feats = features(&chunk, cfg, model.encoder.as_ref())?;
                    let g = sample_loss_and_grad(&feats.frames.view(), *label, &state.weights, &head_cfg)?;
                    Ok((g.loss, g.grads))
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = reduce(per, &state.weights)?;
            let lr = one_cycle_lr(state.step, total_steps, tc)?;
            let rec = StepRecord {
                step: state.step,
                epoch,
                lr,
                loss,
            };
            if let Some(log) = opts.log.as_deref_mut() {
                writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(Path::new("<train log>"), e))?;
            }
            steps.push(rec);
            epoch_loss += loss;
            state.running_loss = loss;
            state.sgd_step(&grads, lr, tc);
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
        log::info!("epoch {} mean loss {:.4}", epoch + 1, epoch_losses[epoch]);
        model.head = state.weights.clone();
        model.meta.epoch = epoch + 1;
        if let Some(dir) = opts.checkpoint_dir {
            model.save(dir.join(format!("epoch_{}.svck", epoch + 1)))?;
        }
    }
    Ok(TrainOutcome {
        model,
        steps,
        epoch_losses,
    })
}

/// Random crop, or the whole utterance when it is shorter than the minimum.
fn training_chunk(w: &Waveform, spec: &ChunkSpec, seed: u64, sample_id: u64) -> Result<Waveform> {
    if w.duration() < spec.min_dur {
        return Ok(w.clone());
    }
    random_chunk(w, spec, &mut rng_indexed(seed, "chunk", sample_id))
}
