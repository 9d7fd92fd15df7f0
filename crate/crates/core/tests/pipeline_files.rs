//! File-level pipeline on a tiny synthetic corpus.

use svkit::archive::EmbeddingArchive;
use svkit::checkpoint::{read_meta, Model};
use svkit::config::PipelineConfig;
use svkit::pipeline::{eval_files, extract_embeddings, extract_to_file, list_wavs, score_to_file, train_to_file, ScoreFiles, TrainFiles};
use svkit::synth::{generate, SynthConfig};

fn tiny() -> SynthConfig {
    SynthConfig {
        n_speakers: 4,
        utts_per_speaker: 4,
        train_per_speaker: 2,
        min_dur: 2.0,
        max_dur: 2.5,
        nontargets_per_utt: 3,
        seed: 11,
        ..Default::default()
    }
}

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 1;
    cfg.train.stage1_chunk.min_dur = 1.0;
    cfg.train.stage1_chunk.max_dur = 1.5;
    cfg
}

#[test]
fn train_extract_score_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&tiny(), &dir.path().join("corpus")).unwrap();
    let cfg = config();
    let ckpt = dir.path().join("model.svck");
    let log = dir.path().join("train_log.jsonl");
    let model = train_to_file(
        &cfg,
        &TrainFiles {
            manifest: &corpus.train_manifest,
            out: &ckpt,
            log: Some(&log),
            checkpoint_dir: None,
        },
    )
    .unwrap();

    let meta = read_meta(&ckpt).unwrap();
    assert_eq!(meta.speakers.len(), 4);
    assert_eq!(meta.config, cfg);
    let lines = std::fs::read_to_string(&log).unwrap();
    assert!(lines.lines().count() > 0);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    let emb = dir.path().join("emb.bin");
    let n = extract_to_file(&ckpt, &corpus.eval_dir, &emb, None).unwrap();
    assert_eq!(n, 8);
    // reloading the checkpoint does not change the embeddings
    let reloaded = Model::load(&ckpt).unwrap();
    let wavs = list_wavs(&corpus.eval_dir).unwrap();
    let a = extract_embeddings(&reloaded, &wavs).unwrap();
    assert_eq!(a, EmbeddingArchive::read(&emb).unwrap());
    assert_eq!(a.dim, model.meta.head.embed_dim);

    let scores = dir.path().join("scores.tsv");
    let n_trials = score_to_file(
        &cfg,
        &ScoreFiles {
            embeddings: &emb,
            trials: &corpus.trials,
            out: &scores,
            cohort: None,
            src_meta: None,
        },
    )
    .unwrap();
    assert_eq!(n_trials, corpus.n_target + corpus.n_nontarget);

    let report = eval_files(&cfg, &scores, &corpus.key).unwrap();
    assert_eq!(report.counts.target, corpus.n_target);
    assert_eq!(report.counts.nontarget, corpus.n_nontarget);
    assert!((0.0..=1.0).contains(&report.eer));
    assert!(report.min_dcf_001 <= 1.0 && report.min_dcf_005 <= 1.0);
}

#[test]
fn snorm_without_cohort_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config();
    cfg.scoring.snorm = true;
    let emb = dir.path().join("emb.bin");
    let mut a = EmbeddingArchive::new(2);
    a.push("x", vec![1.0, 0.0]).unwrap();
    a.push("y", vec![0.0, 1.0]).unwrap();
    a.write(&emb).unwrap();
    let trials = dir.path().join("trials.tsv");
    std::fs::write(&trials, "x\ty\n").unwrap();
    let err = score_to_file(
        &cfg,
        &ScoreFiles {
            embeddings: &emb,
            trials: &trials,
            out: &dir.path().join("s.tsv"),
            cohort: None,
            src_meta: None,
        },
    );
    assert!(err.is_err());
}
