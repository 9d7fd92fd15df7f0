//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (visible without `--nocapture`) and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svkit::audio::Waveform;
use svkit::augment::{apply_policy, mix_noise_at_snr, Applied, AugmentConfig, AugmentPolicy};
use svkit::config::PipelineConfig;
use svkit::encoder::{encode, forward_trace, init_encoder, EncoderConfig};
use svkit::gradcheck::grad_check;
use svkit::head::{init_head, stats_pool, HeadConfig};
use svkit::metrics::{compute_eer, compute_min_dcf, DcfParams, ScoreSet};
use svkit::scoring::{adaptive_snorm, channel_normalize, ScoreRecord, Source, Trial};
use svkit::synth::{generate, SynthConfig, SynthCorpus};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} ({name}): {verdict} -- {detail}");
    assert!(pass, "criterion {n} failed: {detail}");
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["svkit"];
    argv.extend_from_slice(args);
    svkit_cli::run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_fidelity() {
    const FD_STEP: f64 = 1e-5;
    const MIN_COORDS: usize = 200;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let cfg = HeadConfig {
        input_dim: 12,
        tdnn_dim: 24,
        embed_dim: 10,
        n_classes: 6,
        margin: 0.35,
        scale: 32.0,
        ..Default::default()
    };
    let w = init_head(&cfg, &mut ChaCha8Rng::seed_from_u64(101)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let batch: Vec<(Array2<f64>, usize)> = (0..6)
        .map(|i| (Array2::from_shape_simple_fn((20, 12), || rng.gen_range(-1.5..1.5)), i))
        .collect();
    let r = grad_check(&w, &batch, &cfg, FD_STEP, MIN_COORDS, 103).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r.max_rel_error < TOL && r.coords_checked >= MIN_COORDS && secs < 10.0;
    report(
        1,
        "gradient fidelity",
        pass,
        &format!(
            "max rel err {:.3e} (< {TOL:e}) over {} coords (>= {MIN_COORDS}), worst {}[{}], {secs:.2} s (< 10 s)",
            r.max_rel_error, r.coords_checked, r.worst.0, r.worst.1
        ),
    );
}

// ---------------------------------------------------------------- 2

/// Exhaustive sweep over midpoint thresholds with O(n^2) counting.
fn oracle_curve(t: &[f64], n: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<f64> = t.iter().chain(n).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut th = vec![f64::NEG_INFINITY];
    th.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    th.push(f64::INFINITY);
    th.iter()
        .map(|&x| {
            let miss = t.iter().filter(|&&v| v < x).count() as f64 / t.len() as f64;
            let fa = n.iter().filter(|&&v| v >= x).count() as f64 / n.len() as f64;
            (miss, fa)
        })
        .collect()
}

fn oracle_eer(t: &[f64], n: &[f64]) -> f64 {
    let c = oracle_curve(t, n);
    let k = (1..c.len()).find(|&k| c[k].1 - c[k].0 <= 0.0).unwrap();
    let (m0, f0) = c[k - 1];
    let (m1, f1) = c[k];
    let a = (f0 - m0) / ((f0 - m0) - (f1 - m1));
    m0 + a * (m1 - m0)
}

fn oracle_dcf(t: &[f64], n: &[f64], p: f64) -> f64 {
    oracle_curve(t, n)
        .iter()
        .map(|&(m, f)| (p * m + (1.0 - p) * f) / p.min(1.0 - p))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_2_metric_oracle() {
    const TOL: f64 = 1e-9;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let nt = rng.gen_range(1..=100);
        let nn = rng.gen_range(1..=100);
        let shift = rng.gen_range(0.0..2.0);
        // every other set on a coarse grid so that ties occur
        let draw = |rng: &mut ChaCha8Rng, mu: f64| {
            let x: f64 = rng.gen_range(-1.0..1.0) + mu;
            if i % 2 == 0 {
                (x * 10.0).round() / 10.0
            } else {
                x
            }
        };
        let t: Vec<f64> = (0..nt).map(|_| draw(&mut rng, shift)).collect();
        let n: Vec<f64> = (0..nn).map(|_| draw(&mut rng, 0.0)).collect();
        let set = ScoreSet::new(t.clone(), n.clone()).unwrap();
        worst = worst.max((compute_eer(&set).unwrap().0 - oracle_eer(&t, &n)).abs());
        for p in [0.01, 0.05] {
            let d = compute_min_dcf(&set, &DcfParams::new(p)).unwrap().0;
            worst = worst.max((d - oracle_dcf(&t, &n, p)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "metric oracle equivalence",
        worst <= TOL && secs < 30.0,
        &format!("200 sets, max |diff| {worst:.2e} (<= {TOL:e}), {secs:.2} s (< 30 s)"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_normalization_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    // (a) adaptive s-norm under positive-affine maps
    let mut snorm_dev: f64 = 0.0;
    // cohort-sized top-K sets; tiny K with near-tied scores makes sigma so
    // small that input rounding alone exceeds the tolerance
    for i in 0..200 {
        let k = rng.gen_range(10..=200);
        let e: Vec<f64> = (0..k + rng.gen_range(0..300)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..k + rng.gen_range(0..300)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = rng.gen_range(-1.0..1.0);
        let (a, b) = if i == 0 { (2.0, 3.0) } else { (rng.gen_range(0.1..5.0), rng.gen_range(-3.0..3.0)) };
        let f = |x: &f64| a * x + b;
        let base = adaptive_snorm(raw, &e, &t, k).unwrap();
        let moved = adaptive_snorm(f(&raw), &e.iter().map(f).collect::<Vec<_>>(), &t.iter().map(f).collect::<Vec<_>>(), k).unwrap();
        snorm_dev = snorm_dev.max((base - moved).abs());
    }
    let pass_a = snorm_dev <= 1e-12;

    // (b) EER under strictly increasing maps, compared exactly
    let mut eer_equal = true;
    for _ in 0..100 {
        let t: Vec<f64> = (0..rng.gen_range(1..100)).map(|_| rng.gen_range(-0.5..1.0)).collect();
        let n: Vec<f64> = (0..rng.gen_range(1..100)).map(|_| rng.gen_range(-1.0..0.5)).collect();
        let base = compute_eer(&ScoreSet::new(t.clone(), n.clone()).unwrap()).unwrap().0;
        let maps: [fn(f64) -> f64; 3] = [f64::exp, |x| x * x * x + x, |x| 3.0 * x - 7.0];
        for g in maps {
            let set = ScoreSet::new(t.iter().map(|&x| g(x)).collect(), n.iter().map(|&x| g(x)).collect()).unwrap();
            eer_equal &= compute_eer(&set).unwrap().0 == base;
        }
    }

    // (c) channel-normalized groups
    let srcs = [Source::Tel, Source::Mic];
    let records: Vec<ScoreRecord> = (0..400)
        .map(|i| {
            let mut trial = Trial::new(format!("e{i}"), format!("t{i}"), None);
            trial.enroll_src = Some(srcs[i % 2]);
            trial.test_src = Some(srcs[(i / 2) % 2]);
            let offset = 0.3 * (i % 4) as f64;
            ScoreRecord {
                trial,
                raw_score: rng.gen_range(-1.0..1.0) * 0.4 + offset,
                normalized_score: None,
            }
        })
        .collect();
    let normed = channel_normalize(&records).unwrap();
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for e in srcs {
        for t in srcs {
            let g: Vec<f64> = normed.iter().filter(|r| r.src_pair() == Some((e, t))).map(|r| r.score()).collect();
            let m = g.iter().sum::<f64>() / g.len() as f64;
            let sd = (g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / g.len() as f64).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((sd - 1.0).abs());
        }
    }
    let pass_c = worst_mean <= 1e-9 && worst_std <= 1e-9;
    report(
        3,
        "normalization invariances",
        pass_a && eer_equal && pass_c,
        &format!(
            "(a) s-norm max dev {snorm_dev:.2e} (<= 1e-12); (b) EER exact under monotone maps: {eer_equal}; \
             (c) group |mean| {worst_mean:.2e}, |std-1| {worst_std:.2e} (<= 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_pipeline_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // encoder truncation consistency, bitwise
    let cfg = EncoderConfig::default();
    let weights = init_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(405)).unwrap();
    let wave = Waveform::new((0..16000).map(|_| rng.gen_range(-0.5f32..0.5)).collect(), 16000).unwrap();
    let full = forward_trace(&wave, &cfg, &weights, cfg.n_layers, false).unwrap();
    let mut trunc_ok = true;
    for layer in 1..=cfg.n_layers {
        let c = EncoderConfig {
            truncate_layer: layer,
            ..cfg.clone()
        };
        trunc_ok &= encode(&wave, &c, &weights).unwrap().frames == full.hidden[layer - 1];
    }

    // statistics pooling under frame permutations, exact
    let mut pool_ok = true;
    for _ in 0..50 {
        let t = rng.gen_range(1..200);
        let x = Array2::from_shape_simple_fn((t, 16), || rng.gen_range(-3.0..3.0));
        let mut perm: Vec<usize> = (0..t).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let y = x.select(ndarray::Axis(0), &perm);
        pool_ok &= stats_pool(&x.view(), 1e-5).unwrap() == stats_pool(&y.view(), 1e-5).unwrap();
    }

    // SNR of the mixed noise
    let mut snr_dev: f64 = 0.0;
    for _ in 0..40 {
        let sig = Waveform::new((0..8000).map(|_| rng.gen_range(-0.3f32..0.3)).collect(), 8000).unwrap();
        let noise = Waveform::new((0..3000).map(|_| rng.gen_range(-1f32..1.0)).collect(), 8000).unwrap();
        let snr = rng.gen_range(0.0..20.0);
        let mixed = mix_noise_at_snr(&sig, &noise, snr).unwrap();
        let ps: f64 = sig.samples.iter().map(|&x| f64::from(x).powi(2)).sum();
        let pn: f64 = mixed
            .samples
            .iter()
            .zip(&sig.samples)
            .map(|(&m, &x)| (f64::from(m) - f64::from(x)).powi(2))
            .sum();
        snr_dev = snr_dev.max((10.0 * (ps / pn).log10() - snr).abs());
    }

    // application frequencies of the policy at p = 0.25
    let config = AugmentConfig::default();
    let policy = AugmentPolicy::from_config(&config, 8000, 406).unwrap();
    let short = Waveform::new((0..800).map(|i| (0.3 * (i as f32 * 0.05).sin()) as f32).collect(), 8000).unwrap();
    let mut counts = [0usize; 5];
    const DRAWS: usize = 10_000;
    for seed in 0..DRAWS as u64 {
        let (_, applied) = apply_policy(&short, &policy, seed).unwrap();
        for a in applied {
            counts[match a {
                Applied::Noise { .. } => 0,
                Applied::Rir { .. } => 1,
                Applied::FreqMask { .. } => 2,
                Applied::TimeMask { .. } => 3,
                Applied::Clip { .. } => 4,
            }] += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / DRAWS as f64).collect();
    let freq_ok = freqs.iter().all(|f| (0.235..=0.265).contains(f));
    report(
        4,
        "pipeline correctness",
        trunc_ok && pool_ok && snr_dev <= 0.01 && freq_ok,
        &format!(
            "truncation bitwise: {trunc_ok}; pool permutation exact: {pool_ok}; max SNR error {snr_dev:.2e} dB (<= 0.01); \
             frequencies noise/rir/freq/time/clip {freqs:.4?} (in [0.235, 0.265])"
        ),
    );
}

// ---------------------------------------------------------------- helpers for 5-7

fn write_config(cfg: &PipelineConfig, path: &Path) {
    cfg.save(path).unwrap();
}

struct RunOutputs {
    model: PathBuf,
    log: PathBuf,
    emb: PathBuf,
    scores: PathBuf,
    report: PathBuf,
}

/// train -> extract -> score -> eval through the command line.
fn run_chain(corpus: &SynthCorpus, config: &Path, out: &Path, extra_train: &[&str], threads: Option<&str>) -> RunOutputs {
    std::fs::create_dir_all(out).unwrap();
    let o = RunOutputs {
        model: out.join("model.svck"),
        log: out.join("train_log.jsonl"),
        emb: out.join("embeddings.bin"),
        scores: out.join("scores.tsv"),
        report: out.join("report.json"),
    };
    let pre: Vec<&str> = match threads {
        Some(t) => vec!["--threads", t],
        None => vec![],
    };
    let with = |args: &[&str]| -> i32 {
        let mut v = pre.clone();
        v.extend_from_slice(args);
        cli(&v)
    };
    let mut train = vec![
        "train",
        "--config",
        s(config),
        "--manifest",
        s(&corpus.train_manifest),
        "--out",
        s(&o.model),
        "--log",
        s(&o.log),
    ];
    train.extend_from_slice(extra_train);
    assert_eq!(with(&train), 0, "train failed");
    let code = with(&[
        "extract",
        "--checkpoint",
        s(&o.model),
        "--wav-dir",
        s(&corpus.eval_dir),
        "--out",
        s(&o.emb),
    ]);
    assert_eq!(code, 0, "extract failed");
    let code = with(&[
        "score",
        "--config",
        s(config),
        "--embeddings",
        s(&o.emb),
        "--trials",
        s(&corpus.trials),
        "--out",
        s(&o.scores),
    ]);
    assert_eq!(code, 0, "score failed");
    let code = with(&[
        "eval",
        "--config",
        s(config),
        "--scores",
        s(&o.scores),
        "--key",
        s(&corpus.key),
        "--out",
        s(&o.report),
    ]);
    assert_eq!(code, 0, "eval failed");
    o
}

fn read_report(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn losses(log: &Path) -> Vec<f64> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect()
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_synthetic_benchmark() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::default();
    let corpus = generate(&synth, &dir.path().join("data")).unwrap();
    let cfg = PipelineConfig::default();
    assert!(cfg.train.epochs + cfg.train.stage2_epochs <= 5);
    let config = dir.path().join("config.json");
    write_config(&cfg, &config);
    let on = run_chain(&corpus, &config, &dir.path().join("aug"), &[], None);
    let secs = start.elapsed().as_secs_f64();
    let off = run_chain(&corpus, &config, &dir.path().join("noaug"), &["--no-augment"], None);

    let r_on = read_report(&on.report);
    let r_off = read_report(&off.report);
    let eer = r_on["eer"].as_f64().unwrap();
    let dcf = r_on["min_dcf_005"].as_f64().unwrap();
    let eer_off = r_off["eer"].as_f64().unwrap();
    let l = losses(&on.log);
    let (first, last) = (l[0], l[l.len() - 1]);
    let pass = eer < 0.05 && dcf < 0.3 && secs < 300.0 && eer - eer_off <= 0.02 && last < first;
    report(
        5,
        "synthetic benchmark",
        pass,
        &format!(
            "{} speakers x {} utts ({} held out each), {} target / {} nontarget trials; EER {:.2}% (< 5%), \
             minDCF(0.05) {dcf:.4} (< 0.3), minDCF(0.01) {:.4}; runtime {secs:.1} s (< 300 s); \
             EER without augmentation {:.2}% (improvement {:.2} points, <= 2); train loss {first:.3} -> {last:.3}",
            synth.n_speakers,
            synth.utts_per_speaker,
            synth.utts_per_speaker - synth.train_per_speaker,
            corpus.n_target,
            corpus.n_nontarget,
            100.0 * eer,
            r_on["min_dcf_001"].as_f64().unwrap(),
            100.0 * eer_off,
            100.0 * (eer - eer_off),
        ),
    );
}

// ---------------------------------------------------------------- 6

fn small_corpus(dir: &Path, seed: u64) -> SynthCorpus {
    generate(
        &SynthConfig {
            n_speakers: 6,
            utts_per_speaker: 8,
            train_per_speaker: 3,
            min_dur: 5.0,
            max_dur: 6.0,
            nontargets_per_utt: 4,
            seed,
            ..Default::default()
        },
        dir,
    )
    .unwrap()
}

fn encoder_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.head.input = svkit::head::HeadInput::Encoder;
    cfg.encoder.sample_rate = cfg.audio.sample_rate;
    cfg.train.epochs = 2;
    cfg
}

#[test]
fn criterion_6_ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("data"), 6);
    let cfg = encoder_config();
    let n_layers = cfg.encoder.n_layers;
    let config = dir.path().join("config.json");
    write_config(&cfg, &config);
    let table = dir.path().join("table.txt");
    let json = dir.path().join("ablation.json");
    let started = Instant::now();
    let code = cli(&[
        "ablate-layers",
        "--config",
        s(&config),
        "--layers",
        &format!("1,3,{n_layers}"),
        "--manifest",
        s(&corpus.train_manifest),
        "--eval-wav-dir",
        s(&corpus.eval_dir),
        "--trials",
        s(&corpus.trials),
        "--key",
        s(&corpus.key),
        "--work-dir",
        s(&dir.path().join("work")),
        "--out",
        s(&table),
        "--json-out",
        s(&json),
    ]);
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let shaped = lines.len() == 4
        && lines[0].contains("Layer")
        && lines[0].contains("EER")
        && lines[0].contains("minDCF(0.01)")
        && lines[0].contains("minDCF(0.05)")
        && lines[1..]
            .iter()
            .zip([1, 3, n_layers])
            .all(|(l, layer)| l.split_whitespace().next() == Some(&layer.to_string()));
    let rows: serde_json::Value = read_report(&json);
    let top = rows.as_array().unwrap().last().unwrap()["report"].clone();

    // the same layer through the ordinary command chain
    let default = run_chain(&corpus, &config, &dir.path().join("default"), &["--layer", &n_layers.to_string()], None);
    let plain = read_report(&default.report);
    let equal = top == plain;
    let out_of_range = cli(&[
        "ablate-layers",
        "--config",
        s(&config),
        "--layers",
        &format!("{}", n_layers + 1),
        "--manifest",
        s(&corpus.train_manifest),
        "--eval-wav-dir",
        s(&corpus.eval_dir),
        "--trials",
        s(&corpus.trials),
        "--key",
        s(&corpus.key),
        "--work-dir",
        s(&dir.path().join("work2")),
        "--out",
        s(&dir.path().join("t2.txt")),
    ]);
    let _ = writeln!(std::io::stderr(), "{text}");
    report(
        6,
        "ablation harness",
        shaped && equal && out_of_range == 2,
        &format!(
            "table rows for layers 1,3,{n_layers}: {shaped}; layer-{n_layers} row equals plain pipeline exactly: {equal}; \
             out-of-range layer exit code {out_of_range} (== 2); ablation time {secs:.1} s"
        ),
    );
}

// ---------------------------------------------------------------- 7

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Every subcommand once, single-threaded, writing under `out`.
fn run_everything(corpus: &SynthCorpus, data: &Path, out: &Path) {
    let mut cfg = encoder_config();
    cfg.seed = 77;
    cfg.train.epochs = 1;
    cfg.scoring.top_k = 5;
    std::fs::create_dir_all(out).unwrap();
    let config = out.join("config.json");
    write_config(&cfg, &config);
    let o = run_chain(corpus, &config, &out.join("chain"), &["--seed", "77", "--checkpoint-dir", s(&out.join("epochs"))], Some("1"));
    let cohort = out.join("cohort.bin");
    let t = ["--threads", "1"];
    let run = |args: &[&str]| {
        let mut v = t.to_vec();
        v.extend_from_slice(args);
        assert_eq!(cli(&v), 0, "{args:?}");
    };
    run(&[
        "extract",
        "--checkpoint",
        s(&o.model),
        "--wav-dir",
        s(&data.join("train")),
        "--out",
        s(&cohort),
        "--features-out",
        s(&out.join("features.bin")),
    ]);
    run(&[
        "score",
        "--config",
        s(&config),
        "--embeddings",
        s(&o.emb),
        "--trials",
        s(&corpus.trials),
        "--cohort",
        s(&cohort),
        "--src-meta",
        s(&corpus.src_meta),
        "--snorm",
        "--chnorm",
        "--out",
        s(&out.join("scores_norm.tsv")),
    ]);
    run(&[
        "eval",
        "--scores",
        s(&out.join("scores_norm.tsv")),
        "--key",
        s(&corpus.key),
        "--out",
        s(&out.join("report_norm.json")),
        "--table",
        s(&out.join("table_norm.txt")),
    ]);
    let wav = std::fs::read_dir(&corpus.eval_dir).unwrap().next().unwrap().unwrap().path();
    run(&[
        "augment",
        "--config",
        s(&config),
        "--seed",
        "5",
        "--in",
        s(&wav),
        "--out",
        s(&out.join("augmented.wav")),
        "--record",
        s(&out.join("augmented.json")),
    ]);
    run(&[
        "extract",
        "--config",
        s(&config),
        "--seed",
        "9",
        "--wav-dir",
        s(&corpus.eval_dir),
        "--out",
        s(&out.join("untrained.bin")),
    ]);
    run(&["inspect", "config", "--config", s(&config), "--out", s(&out.join("resolved.json"))]);
    run(&["inspect", "schema", "--out", s(&out.join("schema.json"))]);
    run(&["inspect", "checkpoint", "--checkpoint", s(&o.model), "--out", s(&out.join("meta.json"))]);
    run(&[
        "ablate-layers",
        "--config",
        s(&config),
        "--layers",
        "1,2",
        "--manifest",
        s(&corpus.train_manifest),
        "--eval-wav-dir",
        s(&corpus.eval_dir),
        "--trials",
        s(&corpus.trials),
        "--key",
        s(&corpus.key),
        "--work-dir",
        s(&out.join("ablation")),
        "--out",
        s(&out.join("ablation.txt")),
    ]);
}

#[test]
fn criterion_7_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let corpus = small_corpus(&data, 7);
    let a = dir.path().join("run_a");
    let b = dir.path().join("run_b");
    run_everything(&corpus, &data, &a);
    run_everything(&corpus, &data, &b);
    let fa = files_under(&a);
    let fb = files_under(&b);
    let mut differing = Vec::new();
    for f in &fa {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            differing.push(f.display().to_string());
        }
    }
    let pass = fa == fb && differing.is_empty() && fa.len() >= 20;
    report(
        7,
        "reproducibility",
        pass,
        &format!(
            "{} output files from extract/train/score/eval/augment/ablate-layers/inspect at --threads 1, \
             byte-identical across two runs: {} (differing: {differing:?})",
            fa.len(),
            fa == fb && differing.is_empty()
        ),
    );
}
