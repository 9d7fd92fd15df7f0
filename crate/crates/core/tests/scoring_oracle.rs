//! Scoring chain against a direct reference implementation.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svkit::archive::EmbeddingArchive;
use svkit::scoring::{score_trials, Cohort, ScoreOptions, Source, Trial, TrialSet};

const TOL: f64 = 1e-9;

struct Fixture {
    archive: EmbeddingArchive,
    cohort: EmbeddingArchive,
    trials: TrialSet,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    let mut archive = EmbeddingArchive::new(dim);
    for i in 0..20 {
        archive.push(format!("u{i:02}"), vec(&mut rng)).unwrap();
    }
    let mut cohort = EmbeddingArchive::new(dim);
    for i in 0..30 {
        cohort.push(format!("c{i:02}"), vec(&mut rng)).unwrap();
    }
    let src = |i: usize| if i % 3 == 0 { Source::Mic } else { Source::Tel };
    let mut trials = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while trials.len() < 50 {
        let (a, b) = (rng.gen_range(0..20), rng.gen_range(0..20));
        if a == b || !seen.insert((a, b)) {
            continue;
        }
        let mut t = Trial::new(format!("u{a:02}"), format!("u{b:02}"), None);
        t.enroll_src = Some(src(a));
        t.test_src = Some(src(b));
        trials.push(t);
    }
    Fixture {
        archive,
        cohort,
        trials: TrialSet { trials },
    }
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        let (x, y) = (f64::from(a[i]), f64::from(b[i]));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn top_stats(v: &EmbeddingArchive, cohort: &EmbeddingArchive, id: &str, k: usize) -> (f64, f64) {
    let e = v.get(id).unwrap();
    let mut s: Vec<f64> = cohort.records.iter().map(|(_, c)| cos(e, c)).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mean = s[..k].iter().sum::<f64>() / k as f64;
    let var = s[..k].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64;
    (mean, var.sqrt())
}

fn reference(f: &Fixture, k: usize) -> Vec<f64> {
    let snormed: Vec<f64> = f
        .trials
        .trials
        .iter()
        .map(|t| {
            let raw = cos(f.archive.get(&t.enroll_id).unwrap(), f.archive.get(&t.test_id).unwrap());
            let (me, se) = top_stats(&f.archive, &f.cohort, &t.enroll_id, k);
            let (mt, st) = top_stats(&f.archive, &f.cohort, &t.test_id, k);
            0.5 * ((raw - me) / se + (raw - mt) / st)
        })
        .collect();
    let mut groups: HashMap<(Source, Source), Vec<f64>> = HashMap::new();
    for (t, &s) in f.trials.trials.iter().zip(&snormed) {
        groups.entry(t.src_pair().unwrap()).or_default().push(s);
    }
    f.trials
        .trials
        .iter()
        .zip(&snormed)
        .map(|(t, &s)| {
            let g = &groups[&t.src_pair().unwrap()];
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let sd = (g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            (s - mean) / sd
        })
        .collect()
}

fn opts(f: &Fixture, k: usize) -> ScoreOptions {
    ScoreOptions {
        snorm: Some((Cohort::from_archive(&f.cohort), k)),
        chnorm: true,
    }
}

#[test]
fn snorm_then_chnorm_matches_reference() {
    for seed in 0..5 {
        let f = fixture(seed);
        let k = 10;
        let got = score_trials(&f.archive, &f.trials, &opts(&f, k)).unwrap();
        let want = reference(&f, k);
        for (r, w) in got.iter().zip(&want) {
            assert!((r.score() - w).abs() <= TOL, "seed {seed}: {} vs {w}", r.score());
        }
    }
}

#[test]
fn trial_order_does_not_change_scores() {
    let f = fixture(7);
    let base = score_trials(&f.archive, &f.trials, &opts(&f, 10)).unwrap();
    let by_key: HashMap<_, _> = base.iter().map(|r| (r.trial.key(), r.score())).collect();
    let mut shuffled = f.trials.clone();
    shuffled.trials.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let again = score_trials(&f.archive, &shuffled, &opts(&f, 10)).unwrap();
    for r in &again {
        assert_eq!(r.score(), by_key[&r.trial.key()]);
    }
}

#[test]
fn raw_scores_are_plain_cosines() {
    let f = fixture(3);
    let got = score_trials(&f.archive, &f.trials, &ScoreOptions::default()).unwrap();
    for r in &got {
        let want = cos(f.archive.get(&r.trial.enroll_id).unwrap(), f.archive.get(&r.trial.test_id).unwrap());
        assert!((r.raw_score - want).abs() <= 1e-12);
        assert_eq!(r.normalized_score, None);
    }
}
