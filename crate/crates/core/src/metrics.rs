//! Trial/key parsing and detection metrics (EER, minDCF).
//!
//! Decision rule: a trial is accepted when `score >= threshold`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{Label, Source, Trial, TrialSet};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target_scores: Vec<f64>, nontarget_scores: Vec<f64>) -> Result<Self> {
        let s = Self {
            target_scores,
            nontarget_scores,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_scores.is_empty() || self.nontarget_scores.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "metrics need target and nontarget scores (got {} and {})",
                self.target_scores.len(),
                self.nontarget_scores.len()
            )));
        }
        if self
            .target_scores
            .iter()
            .chain(&self.nontarget_scores)
            .any(|s| !s.is_finite())
        {
            return Err(Error::NonFinite("score set contains non-finite scores".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_tar: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl DcfParams {
    pub fn new(p_tar: f64) -> Self {
        Self {
            p_tar,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_tar > 0.0 && self.p_tar < 1.0) {
            return Err(Error::InvalidArgument(format!("p_tar must be in (0, 1), got {}", self.p_tar)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidArgument("detection costs must be positive".into()));
        }
        Ok(())
    }
}

/// Operating point at one threshold.
#[derive(Debug, Clone, Copy)]
struct Point {
    threshold: f64,
    p_miss: f64,
    p_fa: f64,
}

/// Operating points at every distinct score (ascending) and at +inf.
fn operating_points(s: &ScoreSet) -> Vec<Point> {
    let nt = s.target_scores.len() as f64;
    let nn = s.nontarget_scores.len() as f64;
    let mut all: Vec<(f64, bool)> = s
        .target_scores
        .iter()
        .map(|&x| (x, true))
        .chain(s.nontarget_scores.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // counts strictly below the current threshold
    let (mut tgt_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let thr = all[i].0;
        points.push(Point {
            threshold: thr,
            p_miss: tgt_below as f64 / nt,
            p_fa: (nn - non_below as f64) / nn,
        });
        while i < all.len() && all[i].0 == thr {
            if all[i].1 {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(Point {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    points
}

/// Equal error rate, linearly interpolated between the two operating points
/// that bracket `P_fa = P_miss`. Returns `(eer, threshold)`.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    s.validate()?;
    let pts = operating_points(s);
    let i = pts
        .iter()
        .position(|p| p.p_fa - p.p_miss <= 0.0)
        .expect("the +inf point has p_fa - p_miss = -1");
    // the first point has p_fa = 1, p_miss = 0, so i >= 1
    let (a, b) = (pts[i - 1], pts[i]);
    let da = a.p_fa - a.p_miss;
    let db = b.p_fa - b.p_miss;
    let alpha = da / (da - db);
    let eer = a.p_miss + alpha * (b.p_miss - a.p_miss);
    let threshold = if b.threshold.is_finite() {
        a.threshold + alpha * (b.threshold - a.threshold)
    } else {
        a.threshold
    };
    Ok((eer.clamp(0.0, 1.0), threshold))
}

/// Minimum normalized detection cost over all thresholds. Returns
/// `(min_dcf, threshold)`; the threshold is `+inf` when rejecting everything
/// is optimal.
pub fn compute_min_dcf(s: &ScoreSet, p: &DcfParams) -> Result<(f64, f64)> {
    s.validate()?;
    p.validate()?;
    let w_miss = p.c_miss * p.p_tar;
    let w_fa = p.c_fa * (1.0 - p.p_tar);
    let norm = w_miss.min(w_fa);
    let mut best = (f64::INFINITY, f64::INFINITY);
    for pt in operating_points(s) {
        let dcf = (w_miss * pt.p_miss + w_fa * pt.p_fa) / norm;
        if dcf < best.0 {
            best = (dcf, pt.threshold);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub target: usize,
    pub nontarget: usize,
}

/// Metric summary for one score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf_001: f64,
    pub min_dcf_005: f64,
    pub counts: TrialCounts,
}

impl MetricReport {
    pub fn compute(s: &ScoreSet, c_miss: f64, c_fa: f64) -> Result<Self> {
        let (eer, eer_threshold) = compute_eer(s)?;
        let dcf = |p_tar| {
            compute_min_dcf(
                s,
                &DcfParams {
                    p_tar,
                    c_miss,
                    c_fa,
                },
            )
            .map(|r| r.0)
        };
        Ok(Self {
            eer,
            eer_threshold,
            min_dcf_001: dcf(0.01)?,
            min_dcf_005: dcf(0.05)?,
            counts: TrialCounts {
                target: s.target_scores.len(),
                nontarget: s.nontarget_scores.len(),
            },
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct");
        s.push('\n');
        s
    }
}

/// Plain-text table with one row per encoder layer.
pub fn format_layer_table(rows: &[(usize, MetricReport)]) -> String {
    let mut out = format!("{:>5}  {:>8}  {:>12}  {:>12}\n", "Layer", "EER(%)", "minDCF(0.01)", "minDCF(0.05)");
    for (layer, r) in rows {
        out.push_str(&format!(
            "{:>5}  {:>8.2}  {:>12.4}  {:>12.4}\n",
            layer,
            100.0 * r.eer,
            r.min_dcf_001,
            r.min_dcf_005
        ));
    }
    out
}

fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        rows.push((i + 1, trimmed.split('\t').map(str::to_string).collect()));
    }
    Ok(rows)
}

/// Parse `enroll<TAB>test[<TAB>label]` trials, optionally joining labels from
/// a key file and source types (`utt<TAB>tel|mic`) from a metadata file.
pub fn parse_trials(trial_path: &Path, key_path: Option<&Path>, src_meta_path: Option<&Path>) -> Result<TrialSet> {
    let name = trial_path.display().to_string();
    let mut trials = Vec::new();
    let mut seen = HashSet::new();
    for (line, fields) in read_tsv(trial_path)? {
        let err = |msg: String| Error::Parse {
            file: name.clone(),
            line,
            msg,
        };
        if !(2..=3).contains(&fields.len()) {
            return Err(err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty id".into()));
        }
        let label = match fields.get(2) {
            Some(l) => Some(l.parse::<Label>().map_err(err)?),
            None => None,
        };
        let trial = Trial::new(&fields[0], &fields[1], label);
        if !seen.insert(trial.key()) {
            return Err(err(format!("duplicate trial ({}, {})", fields[0], fields[1])));
        }
        trials.push(trial);
    }

    if let Some(key_path) = key_path {
        let labels = read_key(key_path)?;
        for t in &mut trials {
            if let Some(&l) = labels.get(&t.key()) {
                t.label = Some(l);
            }
        }
    }

    if let Some(meta) = src_meta_path {
        let sources = read_src_meta(meta)?;
        for t in &mut trials {
            t.enroll_src = sources.get(&t.enroll_id).copied();
            t.test_src = sources.get(&t.test_id).copied();
            if t.enroll_src.is_none() || t.test_src.is_none() {
                t.enroll_src = None;
                t.test_src = None;
            }
        }
    }
    Ok(TrialSet { trials })
}

/// Labels keyed by `(enroll, test)`.
pub fn read_key(path: &Path) -> Result<HashMap<(String, String), Label>> {
    let name = path.display().to_string();
    let mut out = HashMap::new();
    for (line, fields) in read_tsv(path)? {
        let err = |msg: String| Error::Parse {
            file: name.clone(),
            line,
            msg,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let label = fields[2].parse::<Label>().map_err(err)?;
        let key = (fields[0].clone(), fields[1].clone());
        if out.insert(key, label).is_some() {
            return Err(err(format!("duplicate trial ({}, {})", fields[0], fields[1])));
        }
    }
    Ok(out)
}

pub fn read_src_meta(path: &Path) -> Result<HashMap<String, Source>> {
    let name = path.display().to_string();
    let mut out = HashMap::new();
    for (line, fields) in read_tsv(path)? {
        let err = |msg: String| Error::Parse {
            file: name.clone(),
            line,
            msg,
        };
        if fields.len() != 2 {
            return Err(err(format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        out.insert(fields[0].clone(), fields[1].parse::<Source>().map_err(err)?);
    }
    Ok(out)
}

/// Join scores with labels into a score set. Every scored trial must be labelled.
pub fn score_set_from(
    scores: &[((String, String), f64)],
    labels: &HashMap<(String, String), Label>,
) -> Result<ScoreSet> {
    let mut s = ScoreSet::default();
    for (key, score) in scores {
        match labels.get(key) {
            Some(Label::Target) => s.target_scores.push(*score),
            Some(Label::Nontarget) => s.nontarget_scores.push(*score),
            None => return Err(Error::MissingId(format!("no key label for trial ({}, {})", key.0, key.1))),
        }
    }
    s.validate()?;
    Ok(s)
}
