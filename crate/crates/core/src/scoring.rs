//! Trial scoring: cosine similarity, adaptive s-norm over top-K cohort
//! scores, and per source-type-pair channel normalization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::EmbeddingArchive;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

impl std::str::FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Tel,
    Mic,
}

impl std::str::FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tel" => Ok(Source::Tel),
            "mic" => Ok(Source::Mic),
            other => Err(format!("unknown source type {other:?}")),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Tel => "tel",
            Source::Mic => "mic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Option<Label>,
    pub enroll_src: Option<Source>,
    pub test_src: Option<Source>,
}

impl Trial {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, label: Option<Label>) -> Self {
        Self {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            label,
            enroll_src: None,
            test_src: None,
        }
    }

    pub fn src_pair(&self) -> Option<(Source, Source)> {
        Some((self.enroll_src?, self.test_src?))
    }

    pub fn key(&self) -> (String, String) {
        (self.enroll_id.clone(), self.test_id.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub trial: Trial,
    pub raw_score: f64,
    pub normalized_score: Option<f64>,
}

impl ScoreRecord {
    /// The most processed score available.
    pub fn score(&self) -> f64 {
        self.normalized_score.unwrap_or(self.raw_score)
    }

    pub fn src_pair(&self) -> Option<(Source, Source)> {
        self.trial.src_pair()
    }
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embedding dims {} and {} differ", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation of the `k` largest scores.
/// Ties at the k-th position are resolved by a stable descending sort.
pub fn top_k_stats(scores: &[f64], k: usize) -> Result<(f64, f64)> {
    if k == 0 || scores.len() < k {
        return Err(Error::InvalidArgument(format!(
            "top-{k} statistics need at least {k} cohort scores, got {}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..k];
    let mean = top.iter().sum::<f64>() / k as f64;
    let var = top.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / k as f64;
    Ok((mean, var.sqrt()))
}

/// Symmetric adaptive s-norm:
/// `0.5 * ((s - mu_e) / sigma_e + (s - mu_t) / sigma_t)` with statistics over
/// each side's top-K cohort scores.
pub fn adaptive_snorm(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64], k: usize) -> Result<f64> {
    let (mu_e, sd_e) = top_k_stats(enroll_cohort, k)?;
    let (mu_t, sd_t) = top_k_stats(test_cohort, k)?;
    if sd_e == 0.0 {
        return Err(Error::Degenerate("enroll-side top-K cohort scores have zero variance".into()));
    }
    if sd_t == 0.0 {
        return Err(Error::Degenerate("test-side top-K cohort scores have zero variance".into()));
    }
    Ok(0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t))
}

fn group_name(pair: (Source, Source)) -> String {
    format!("{}-{}", pair.0, pair.1)
}

/// Standardize scores within each source-type pair group.
///
/// Group statistics are computed over the sorted group scores so results do
/// not depend on record order.
pub fn channel_normalize(records: &[ScoreRecord]) -> Result<Vec<ScoreRecord>> {
    let mut groups: BTreeMap<(Source, Source), Vec<f64>> = BTreeMap::new();
    for r in records {
        let pair = r.src_pair().ok_or_else(|| {
            Error::MissingId(format!(
                "source type for trial {} {}",
                r.trial.enroll_id, r.trial.test_id
            ))
        })?;
        groups.entry(pair).or_default().push(r.score());
    }
    let mut stats = BTreeMap::new();
    for (pair, mut scores) in groups {
        scores.sort_by(f64::total_cmp);
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        if var == 0.0 {
            return Err(Error::Degenerate(format!(
                "channel group {} has zero score variance",
                group_name(pair)
            )));
        }
        stats.insert(pair, (mean, var.sqrt()));
    }
    Ok(records
        .iter()
        .map(|r| {
            let (mean, sd) = stats[&r.src_pair().expect("checked above")];
            ScoreRecord {
                normalized_score: Some((r.score() - mean) / sd),
                ..r.clone()
            }
        })
        .collect())
}

/// Impostor embeddings used for s-norm statistics.
#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl Cohort {
    pub fn from_archive(a: &EmbeddingArchive) -> Self {
        Self {
            ids: a.records.iter().map(|(id, _)| id.clone()).collect(),
            vectors: a.records.iter().map(|(_, v)| v.iter().map(|&x| f64::from(x)).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Cosine of `e` against every cohort member.
    pub fn scores(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.vectors.iter().map(|c| cosine_score(e, c)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOptions {
    /// Cohort and top-K for adaptive s-norm.
    pub snorm: Option<(Cohort, usize)>,
    pub chnorm: bool,
}

/// Score every trial: raw cosine, then optional s-norm, then optional
/// channel normalization.
pub fn score_trials(archive: &EmbeddingArchive, trials: &TrialSet, opts: &ScoreOptions) -> Result<Vec<ScoreRecord>> {
    let lookup = archive.index();
    let vector = |id: &str| -> Result<Vec<f64>> {
        lookup
            .get(id)
            .map(|&i| archive.records[i].1.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| Error::MissingId(format!("no embedding for {id}")))
    };
    if opts.chnorm {
        if let Some(t) = trials.trials.iter().find(|t| t.src_pair().is_none()) {
            return Err(Error::MissingId(format!(
                "channel normalization needs source types; missing for trial {} {}",
                t.enroll_id, t.test_id
            )));
        }
    }

    let mut ids: Vec<&str> = trials
        .trials
        .iter()
        .flat_map(|t| [t.enroll_id.as_str(), t.test_id.as_str()])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let vectors: HashMap<&str, Vec<f64>> = ids.iter().map(|&id| Ok((id, vector(id)?))).collect::<Result<_>>()?;

    let cohort_scores: HashMap<&str, Vec<f64>> = match &opts.snorm {
        Some((cohort, _)) => {
            let trial_ids: HashSet<&str> = ids.iter().copied().collect();
            let overlap = cohort.ids.iter().filter(|id| trial_ids.contains(id.as_str())).count();
            if overlap > 0 {
                log::warn!("{overlap} cohort embeddings also appear in the trial list (cohort contamination)");
            }
            ids.par_iter()
                .map(|&id| Ok((id, cohort.scores(&vectors[id])?)))
                .collect::<Result<_>>()?
        }
        None => HashMap::new(),
    };

    let mut records: Vec<ScoreRecord> = trials
        .trials
        .par_iter()
        .map(|t| {
            let raw = cosine_score(&vectors[t.enroll_id.as_str()], &vectors[t.test_id.as_str()])?;
            let normalized_score = match &opts.snorm {
                Some((_, k)) => Some(adaptive_snorm(
                    raw,
                    &cohort_scores[t.enroll_id.as_str()],
                    &cohort_scores[t.test_id.as_str()],
                    *k,
                )?),
                None => None,
            };
            Ok(ScoreRecord {
                trial: t.clone(),
                raw_score: raw,
                normalized_score,
            })
        })
        .collect::<Result<_>>()?;
    if opts.chnorm {
        records = channel_normalize(&records)?;
    }
    Ok(records)
}

/// Write `enroll<TAB>test<TAB>score` lines with 17 significant digits.
pub fn write_scores(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{}\t{}\t{:.16e}\n", r.trial.enroll_id, r.trial.test_id, r.score()));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a scores file into `((enroll, test), score)` pairs, in file order.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<((String, String), f64)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: String| Error::Parse {
            file: name.clone(),
            line: i + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let score: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid score {:?}", fields[2])))?;
        if !score.is_finite() {
            return Err(parse_err("non-finite score".into()));
        }
        out.push(((fields[0].to_string(), fields[1].to_string()), score));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let e = [0.3, -2.0, 5.0];
        assert!((cosine_score(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.7071067811865475).abs() < 1e-15);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine_score(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cosine_scale_invariant() {
        let a = [0.3, -2.0, 5.0];
        let b = [1.0, 2.0, -0.5];
        let base = cosine_score(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x * 3.5).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * 0.01).collect();
        assert!((cosine_score(&sa, &sb).unwrap() - base).abs() < 1e-14);
    }

    #[test]
    fn snorm_example() {
        let s = adaptive_snorm(0.75, &[0.9, 0.5, 0.1], &[0.8, 0.6, 0.0], 2).unwrap();
        assert!((s - 0.375).abs() < 1e-12, "{s}");
        let centered = adaptive_snorm(0.7, &[0.9, 0.5, 0.1], &[0.8, 0.6, 0.0], 2).unwrap();
        assert!(centered.abs() < 1e-12);
    }

    #[test]
    fn snorm_degenerate_names_side() {
        let err = adaptive_snorm(0.5, &[0.4, 0.4, 0.1], &[0.8, 0.6], 2).unwrap_err();
        assert!(err.to_string().contains("enroll"));
        let err = adaptive_snorm(0.5, &[0.9, 0.4], &[0.3, 0.3, 0.3], 2).unwrap_err();
        assert!(err.to_string().contains("test"));
        assert!(adaptive_snorm(0.5, &[0.9], &[0.3, 0.1], 2).is_err());
    }

    #[test]
    fn snorm_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let e: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let raw = rng.gen_range(-1.0..1.0);
            let base = adaptive_snorm(raw, &e, &t, 10).unwrap();
            let f = |x: f64| 2.0 * x + 3.0;
            let te: Vec<f64> = e.iter().map(|&x| f(x)).collect();
            let tt: Vec<f64> = t.iter().map(|&x| f(x)).collect();
            let moved = adaptive_snorm(f(raw), &te, &tt, 10).unwrap();
            assert!((base - moved).abs() < 1e-12, "{base} vs {moved}");
        }
    }

    fn rec(e: &str, t: &str, score: f64, src: (Source, Source)) -> ScoreRecord {
        let mut trial = Trial::new(e, t, None);
        trial.enroll_src = Some(src.0);
        trial.test_src = Some(src.1);
        ScoreRecord {
            trial,
            raw_score: score,
            normalized_score: None,
        }
    }

    #[test]
    fn chnorm_example_and_idempotence() {
        let tt = (Source::Tel, Source::Tel);
        let recs = vec![rec("a", "b", 1.0, tt), rec("a", "c", 2.0, tt), rec("a", "d", 3.0, tt)];
        let out = channel_normalize(&recs).unwrap();
        let got: Vec<f64> = out.iter().map(|r| r.score()).collect();
        for (g, e) in got.iter().zip([-1.224744871, 0.0, 1.224744871]) {
            assert!((g - e).abs() < 1e-9);
        }
        let again = channel_normalize(&out).unwrap();
        for (a, b) in again.iter().zip(&out) {
            assert!((a.score() - b.score()).abs() < 1e-12);
        }
        let flat = vec![rec("a", "b", 1.0, tt), rec("a", "c", 1.0, tt)];
        assert!(channel_normalize(&flat).unwrap_err().to_string().contains("tel-tel"));
        let mut missing = recs.clone();
        missing[0].trial.test_src = None;
        assert!(channel_normalize(&missing).is_err());
    }

    #[test]
    fn chnorm_groups_independent_of_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs = [
            (Source::Tel, Source::Tel),
            (Source::Mic, Source::Mic),
            (Source::Tel, Source::Mic),
            (Source::Mic, Source::Tel),
        ];
        let recs: Vec<ScoreRecord> = (0..80)
            .map(|i| rec(&format!("e{i}"), &format!("t{i}"), rng.gen_range(-1.0..1.0), pairs[i % 4]))
            .collect();
        let out = channel_normalize(&recs).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        let out_rev = channel_normalize(&rev).unwrap();
        for r in &out {
            let other = out_rev.iter().find(|o| o.trial == r.trial).unwrap();
            assert_eq!(r.normalized_score, other.normalized_score);
        }
        for p in pairs {
            let g: Vec<f64> = out.iter().filter(|r| r.src_pair() == Some(p)).map(|r| r.score()).collect();
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let sd = (g.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        }
    }
}
