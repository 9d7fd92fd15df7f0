//! End-to-end stages shared by the command line and the layer ablation:
//! utterance preparation, feature and embedding extraction, scoring and
//! evaluation. Every stage reads and writes the same file formats, so a
//! chained run and an ablation row go through identical computations.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::archive::EmbeddingArchive;
use crate::audio::Waveform;
use crate::checkpoint::Model;
use crate::config::PipelineConfig;
use crate::encoder::{encode, EncoderWeights};
use crate::error::{Error, Result};
use crate::frontend::{apply_vad, compute_mfb, energy_vad, sliding_mean_normalize, FeatureSequence};
use crate::head::{embed, HeadInput};
use crate::metrics::{format_layer_table, parse_trials, read_key, score_set_from, MetricReport};
use crate::scoring::{read_scores, score_trials, write_scores, Cohort, ScoreOptions};
use crate::trainer::{read_manifest, train, TrainOptions};

/// Checks the rate and keeps only the frames the energy VAD marks as speech.
pub fn prepare_utterance(w: Waveform, cfg: &PipelineConfig) -> Result<Waveform> {
    w.require_rate(cfg.audio.sample_rate)?;
    if !cfg.vad.enabled {
        return Ok(w);
    }
    let mfb = compute_mfb(&w, &cfg.mfb)?;
    let mask = energy_vad(&mfb, cfg.vad.offset_db, cfg.mfb.log_floor);
    if mask.count_speech() == 0 {
        return Err(Error::Degenerate("no speech frames detected".into()));
    }
    Ok(apply_vad(&w, &mask, &cfg.mfb))
}

/// Head input features: mean-normalized MFB or encoder hidden states.
pub fn features(w: &Waveform, cfg: &PipelineConfig, encoder: Option<&EncoderWeights>) -> Result<FeatureSequence> {
    match cfg.head.input {
        HeadInput::Mfb => {
            let f = compute_mfb(w, &cfg.mfb)?;
            Ok(sliding_mean_normalize(&f, cfg.mfb.norm_window))
        }
        HeadInput::Encoder => {
            let weights = encoder.ok_or_else(|| Error::Config("encoder input selected but no encoder weights".into()))?;
            encode(w, &cfg.encoder, weights)
        }
    }
}

/// WAV files of a directory as `(stem, path)`, sorted by stem.
pub fn list_wavs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if !is_wav {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("non UTF-8 file name {}", path.display())))?
            .to_string();
        out.push((stem, path));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument(format!("two WAV files share the id {}", w[0].0)));
    }
    Ok(out)
}

fn utterance_features(id: &str, path: &Path, model: &Model) -> Result<FeatureSequence> {
    let cfg = &model.meta.config;
    let w = crate::audio::read_wav(path)?;
    let w = prepare_utterance(w, cfg).map_err(|e| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("{id}: {m}")),
        other => other,
    })?;
    features(&w, cfg, model.encoder.as_ref())
}

/// One embedding per WAV, in input order.
pub fn extract_embeddings(model: &Model, wavs: &[(String, PathBuf)]) -> Result<EmbeddingArchive> {
    let vectors: Vec<Vec<f32>> = wavs
        .par_iter()
        .map(|(id, path)| {
            let f = utterance_features(id, path, model)?;
            let e = embed(&f, &model.head, &model.meta.head)?;
            Ok(e.iter().map(|&x| x as f32).collect())
        })
        .collect::<Result<_>>()?;
    let dim = vectors.first().map_or(0, Vec::len);
    let mut archive = EmbeddingArchive::new(dim);
    for ((id, _), v) in wavs.iter().zip(vectors) {
        archive.push(id.clone(), v)?;
    }
    Ok(archive)
}

/// Per-frame head input features, with record ids `<kind>:<utt>:<frame>`.
pub fn dump_features(model: &Model, wavs: &[(String, PathBuf)]) -> Result<EmbeddingArchive> {
    let seqs: Vec<FeatureSequence> = wavs
        .par_iter()
        .map(|(id, path)| utterance_features(id, path, model))
        .collect::<Result<_>>()?;
    let dim = seqs.first().map_or(0, FeatureSequence::dim);
    let mut archive = EmbeddingArchive::new(dim);
    for ((id, _), seq) in wavs.iter().zip(&seqs) {
        for (t, row) in seq.frames.rows().into_iter().enumerate() {
            archive.push(
                format!("{}:{id}:{t}", seq.kind.as_str()),
                row.iter().map(|&x| x as f32).collect(),
            )?;
        }
    }
    Ok(archive)
}

/// Files for the train stage.
pub struct TrainFiles<'a> {
    pub manifest: &'a Path,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    pub checkpoint_dir: Option<&'a Path>,
}

pub fn train_to_file(cfg: &PipelineConfig, files: &TrainFiles) -> Result<Model> {
    let manifest = read_manifest(files.manifest)?;
    let mut log_buf = Vec::new();
    let outcome = train(
        &manifest,
        cfg,
        TrainOptions {
            log: files.log.map(|_| &mut log_buf as &mut dyn std::io::Write),
            checkpoint_dir: files.checkpoint_dir,
        },
    )?;
    if let Some(p) = files.log {
        std::fs::write(p, &log_buf).map_err(|e| Error::io(p, e))?;
    }
    outcome.model.save(files.out)?;
    Ok(outcome.model)
}

pub fn extract_to_file(checkpoint: &Path, wav_dir: &Path, out: &Path, features_out: Option<&Path>) -> Result<usize> {
    let model = Model::load(checkpoint)?;
    let wavs = list_wavs(wav_dir)?;
    if wavs.is_empty() {
        return Err(Error::InvalidArgument(format!("no WAV files in {}", wav_dir.display())));
    }
    extract_embeddings(&model, &wavs)?.write(out)?;
    if let Some(p) = features_out {
        dump_features(&model, &wavs)?.write(p)?;
    }
    Ok(wavs.len())
}

/// Files for the score stage.
pub struct ScoreFiles<'a> {
    pub embeddings: &'a Path,
    pub trials: &'a Path,
    pub out: &'a Path,
    pub cohort: Option<&'a Path>,
    pub src_meta: Option<&'a Path>,
}

pub fn score_to_file(cfg: &PipelineConfig, files: &ScoreFiles) -> Result<usize> {
    let archive = EmbeddingArchive::read(files.embeddings)?;
    let trials = parse_trials(files.trials, None, files.src_meta)?;
    let snorm = if cfg.scoring.snorm {
        let path = files
            .cohort
            .ok_or_else(|| Error::Config("scoring.snorm needs a cohort archive".into()))?;
        let cohort = Cohort::from_archive(&EmbeddingArchive::read(path)?);
        if cohort.len() < cfg.scoring.top_k {
            return Err(Error::InvalidArgument(format!(
                "cohort has {} embeddings, fewer than top_k {}",
                cohort.len(),
                cfg.scoring.top_k
            )));
        }
        Some((cohort, cfg.scoring.top_k))
    } else {
        None
    };
    let opts = ScoreOptions {
        snorm,
        chnorm: cfg.scoring.chnorm,
    };
    let records = score_trials(&archive, &trials, &opts)?;
    write_scores(&records, files.out)?;
    Ok(records.len())
}

pub fn eval_files(cfg: &PipelineConfig, scores: &Path, key: &Path) -> Result<MetricReport> {
    let scores = read_scores(scores)?;
    let labels = read_key(key)?;
    let set = score_set_from(&scores, &labels)?;
    MetricReport::compute(&set, cfg.metrics.c_miss, cfg.metrics.c_fa)
}

/// Inputs of a layer ablation.
pub struct AblationInputs<'a> {
    pub manifest: &'a Path,
    pub eval_wav_dir: &'a Path,
    pub trials: &'a Path,
    pub key: &'a Path,
    pub cohort: Option<&'a Path>,
    pub src_meta: Option<&'a Path>,
    /// Per-layer intermediates go to `<work_dir>/layer_<L>/`.
    pub work_dir: &'a Path,
}

/// Trains, extracts, scores and evaluates once per truncation layer.
pub fn ablate_layers(cfg: &PipelineConfig, layers: &[usize], inputs: &AblationInputs) -> Result<Vec<(usize, MetricReport)>> {
    if cfg.head.input != HeadInput::Encoder {
        return Err(Error::Config("layer ablation needs head.input = \"encoder\"".into()));
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers requested".into()));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > cfg.encoder.n_layers) {
        return Err(Error::Config(format!(
            "layer {bad} outside 1..={}",
            cfg.encoder.n_layers
        )));
    }
    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut c = cfg.clone();
        c.encoder.truncate_layer = layer;
        c.validate()?;
        let dir = inputs.work_dir.join(format!("layer_{layer}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let started = std::time::Instant::now();
        let model = dir.join("model.svck");
        train_to_file(
            &c,
            &TrainFiles {
                manifest: inputs.manifest,
                out: &model,
                log: Some(&dir.join("train_log.jsonl")),
                checkpoint_dir: None,
            },
        )?;
        let emb = dir.join("embeddings.bin");
        extract_to_file(&model, inputs.eval_wav_dir, &emb, None)?;
        let scores = dir.join("scores.tsv");
        score_to_file(
            &c,
            &ScoreFiles {
                embeddings: &emb,
                trials: inputs.trials,
                out: &scores,
                cohort: inputs.cohort,
                src_meta: inputs.src_meta,
            },
        )?;
        let report = eval_files(&c, &scores, inputs.key)?;
        log::info!(
            "layer {layer}: EER {:.2}% in {:.1} s",
            100.0 * report.eer,
            started.elapsed().as_secs_f64()
        );
        rows.push((layer, report));
    }
    Ok(rows)
}

pub fn write_ablation_report(rows: &[(usize, MetricReport)], table_path: &Path, json_path: Option<&Path>) -> Result<()> {
    std::fs::write(table_path, format_layer_table(rows)).map_err(|e| Error::io(table_path, e))?;
    if let Some(p) = json_path {
        let doc: Vec<serde_json::Value> = rows
            .iter()
            .map(|(l, r)| serde_json::json!({"layer": l, "report": r}))
            .collect();
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        std::fs::write(p, s).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
