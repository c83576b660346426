//! Study manifests, demographic balancing and evaluation metrics.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

pub const MIN_AGE: f64 = 18.0;
pub const MAX_AGE: f64 = 110.0;
/// Largest age difference allowed inside a matched pair.
pub const AGE_CALIPER: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid record {study_id}: {reason}")]
    Record { study_id: String, reason: String },
    #[error("duplicate study id {0}")]
    Duplicate(String),
    #[error("{0} class is empty")]
    EmptyClass(Label),
    #[error("no records")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub age: f64,
    pub sex: Sex,
    pub label: Label,
    /// Relative paths resolve against the manifest's directory.
    pub volume_path: String,
}

impl StudyRecord {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |reason: String| {
            Err(CohortError::Record {
                study_id: self.study_id.clone(),
                reason,
            })
        };
        if self.study_id.is_empty() || self.study_id.contains([',', '\n', '\r']) {
            return bad("study id must be non-empty without commas or newlines".into());
        }
        if !(MIN_AGE..=MAX_AGE).contains(&self.age) {
            return bad(format!("age {} outside [{MIN_AGE}, {MAX_AGE}]", self.age));
        }
        Ok(())
    }
}

fn check_unique(records: &[StudyRecord]) -> Result<(), CohortError> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.study_id.as_str()) {
            return Err(CohortError::Duplicate(r.study_id.clone()));
        }
    }
    Ok(())
}

pub fn manifest_to_string(records: &[StudyRecord]) -> Result<String, CohortError> {
    check_unique(records)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|source| CohortError::Csv {
            path: PathBuf::from("<manifest>"),
            source,
        })?;
    }
    let bytes = w.into_inner().expect("in-memory writer");
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_manifest(path: &Path, records: &[StudyRecord]) -> Result<(), CohortError> {
    let text = manifest_to_string(records)?;
    write_atomic(path, text.as_bytes()).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<StudyRecord>, CohortError> {
    let csv_err = |source| CohortError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let records = reader
        .deserialize()
        .collect::<Result<Vec<StudyRecord>, _>>()
        .map_err(csv_err)?;
    check_unique(&records)?;
    Ok(records)
}

/// Absolute location of a record's volume given the manifest path.
pub fn resolve_volume(manifest: &Path, record: &StudyRecord) -> PathBuf {
    let p = Path::new(&record.volume_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

// ---- balancing -----------------------------------------------------------

/// Lexicographic matching objective: more pairs first, then less total age gap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScore {
    pub pairs: usize,
    pub total_age_gap: f64,
}

impl MatchScore {
    const EMPTY: MatchScore = MatchScore {
        pairs: 0,
        total_age_gap: 0.0,
    };

    fn better_than(&self, other: &MatchScore) -> bool {
        self.pairs > other.pairs || (self.pairs == other.pairs && self.total_age_gap < other.total_age_gap - 1e-9)
    }

    pub fn add(self, other: MatchScore) -> MatchScore {
        MatchScore {
            pairs: self.pairs + other.pairs,
            total_age_gap: self.total_age_gap + other.total_age_gap,
        }
    }
}

/// Optimal caliper matching of two age lists (already sorted ascending).
/// Returns index pairs `(pos, neg)`.
///
/// Some optimal matching never crosses on sorted lists, so an LCS-style
/// table over prefixes finds it.
fn match_sorted(pos: &[f64], neg: &[f64]) -> Vec<(usize, usize)> {
    let (n, m) = (pos.len(), neg.len());
    let w = m + 1;
    let mut best = vec![MatchScore::EMPTY; (n + 1) * w];
    // 0 = skip positive, 1 = skip negative, 2 = pair.
    let mut step = vec![0u8; (n + 1) * w];
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut cur = MatchScore { pairs: 0, total_age_gap: f64::INFINITY };
            let mut choice = 0;
            if i > 0 {
                cur = best[(i - 1) * w + j];
            }
            if j > 0 && (i == 0 || best[i * w + j - 1].better_than(&cur)) {
                cur = best[i * w + j - 1];
                choice = 1;
            }
            if i > 0 && j > 0 {
                let gap = (pos[i - 1] - neg[j - 1]).abs();
                if gap <= AGE_CALIPER {
                    let cand = best[(i - 1) * w + j - 1].add(MatchScore {
                        pairs: 1,
                        total_age_gap: gap,
                    });
                    if cand.better_than(&cur) {
                        cur = cand;
                        choice = 2;
                    }
                }
            }
            best[i * w + j] = cur;
            step[i * w + j] = choice;
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match step[i * w + j] {
            0 => i -= 1,
            1 => j -= 1,
            _ => {
                pairs.push((i - 1, j - 1));
                i -= 1;
                j -= 1;
            }
        }
    }
    pairs.reverse();
    pairs
}

/// Matched `(positive, negative)` pairs, same sex, age gap within the caliper,
/// maximizing the number of pairs and then minimizing the summed age gap.
/// Pairs come back ordered by the positive's study id.
pub fn match_pairs(records: &[StudyRecord]) -> Result<Vec<(StudyRecord, StudyRecord)>, CohortError> {
    check_unique(records)?;
    for label in [Label::Positive, Label::Negative] {
        if !records.iter().any(|r| r.label == label) {
            return Err(CohortError::EmptyClass(label));
        }
    }
    let mut pairs = Vec::new();
    for sex in [Sex::F, Sex::M] {
        let group = |label: Label| {
            let mut g: Vec<&StudyRecord> = records.iter().filter(|r| r.sex == sex && r.label == label).collect();
            g.sort_by(|a, b| a.age.total_cmp(&b.age).then_with(|| a.study_id.cmp(&b.study_id)));
            g
        };
        let pos = group(Label::Positive);
        let neg = group(Label::Negative);
        let pa: Vec<f64> = pos.iter().map(|r| r.age).collect();
        let na: Vec<f64> = neg.iter().map(|r| r.age).collect();
        for (i, j) in match_sorted(&pa, &na) {
            pairs.push((pos[i].clone(), neg[j].clone()));
        }
    }
    pairs.sort_by(|a, b| a.0.study_id.cmp(&b.0.study_id));
    Ok(pairs)
}

pub fn match_score(pairs: &[(StudyRecord, StudyRecord)]) -> MatchScore {
    pairs.iter().fold(MatchScore::EMPTY, |s, (p, n)| {
        s.add(MatchScore {
            pairs: 1,
            total_age_gap: (p.age - n.age).abs(),
        })
    })
}

/// Largest class age-mean gap `balance_cohort` leaves in place, in years.
pub const AGE_GAP_TARGET: f64 = 1.0;

/// Balanced subset: matched pairs interleaved positive, negative, ...
///
/// Pairs are then trimmed, most age-skewed first, until the class age means
/// differ by at most [`AGE_GAP_TARGET`]. Sexes are balanced by construction.
pub fn balance_cohort(records: &[StudyRecord]) -> Result<Vec<StudyRecord>, CohortError> {
    let mut pairs = match_pairs(records)?;
    let signed = |(p, n): &(StudyRecord, StudyRecord)| p.age - n.age;
    let mut sum: f64 = pairs.iter().map(signed).sum();
    while !pairs.is_empty() && (sum / pairs.len() as f64).abs() > AGE_GAP_TARGET {
        let dir = sum.signum();
        let (worst, _) = pairs
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, pr)| if dir * signed(pr) > best.1 { (i, dir * signed(pr)) } else { best });
        sum -= signed(&pairs.remove(worst));
    }
    Ok(pairs.into_iter().flat_map(|(p, n)| [p, n]).collect())
}

// ---- demographics --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub count: usize,
    pub female_fraction: f64,
    pub male_fraction: f64,
    pub age_mean: f64,
    /// Population standard deviation.
    pub age_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub positive: Option<ClassStats>,
    pub negative: Option<ClassStats>,
}

impl Demographics {
    /// `(|age mean gap|, |female fraction gap|)` when both classes exist.
    pub fn gaps(&self) -> Option<(f64, f64)> {
        let (p, n) = (self.positive?, self.negative?);
        Some(((p.age_mean - n.age_mean).abs(), (p.female_fraction - n.female_fraction).abs()))
    }
}

fn class_stats<'a>(records: impl Iterator<Item = &'a StudyRecord>) -> Option<ClassStats> {
    let rs: Vec<&StudyRecord> = records.collect();
    if rs.is_empty() {
        return None;
    }
    let n = rs.len() as f64;
    let females = rs.iter().filter(|r| r.sex == Sex::F).count() as f64;
    let mean = rs.iter().map(|r| r.age).sum::<f64>() / n;
    let var = rs.iter().map(|r| (r.age - mean).powi(2)).sum::<f64>() / n;
    Some(ClassStats {
        count: rs.len(),
        female_fraction: females / n,
        male_fraction: 1.0 - females / n,
        age_mean: mean,
        age_std: var.sqrt(),
    })
}

pub fn demographics(records: &[StudyRecord]) -> Result<Demographics, CohortError> {
    if records.is_empty() {
        return Err(CohortError::Empty);
    }
    Ok(Demographics {
        positive: class_stats(records.iter().filter(|r| r.label.is_positive())),
        negative: class_stats(records.iter().filter(|r| !r.label.is_positive())),
    })
}

// ---- metrics -------------------------------------------------------------

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            tp,
            fp,
            tn,
            fn_,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Confusion counts with `prediction >= threshold` read as positive. A rate
/// whose denominator is empty is reported as 0.
pub fn compute_metrics(predictions: &[f64], labels: &[bool], threshold: f64) -> Result<Metrics, CohortError> {
    if predictions.len() != labels.len() {
        return Err(CohortError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(CohortError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, tn, fn_))
}

/// Area under the ROC curve: the probability that a random positive outranks
/// a random negative, ties counting one half. `None` unless both classes occur.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, CohortError> {
    if scores.len() != labels.len() {
        return Err(CohortError::LengthMismatch {
            predictions: scores.len(),
            labels: labels.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    // Mid-ranks over tied groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let p = positives as f64;
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64)))
}
