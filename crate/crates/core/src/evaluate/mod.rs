//! Character-level precision and recall of templated-text detection against
//! gold annotations, plus blinded span sampling for manual review.

mod review;

pub use review::{sample_spans_for_review, write_review, ReviewRow, ReviewSample, ReviewSet};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condense::SidecarRecord;
use crate::span::Module;

pub const DEFAULT_MIN_GOLD_SPAN: usize = 50;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed gold record: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("note {note_id}: span [{start}, {end}) out of bounds")]
    OutOfBounds { note_id: String, start: usize, end: usize },
    #[error("set {set} has {available} spans, {needed} requested")]
    InsufficientSpans {
        set: ReviewSet,
        needed: usize,
        available: usize,
    },
    #[error("CSV error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldLabel {
    Author,
    Templated,
    Structured,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub start: usize,
    pub end: usize,
    pub label: GoldLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub note_id: String,
    pub spans: Vec<GoldSpan>,
}

impl GoldAnnotation {
    /// Checks every span against a note of `len` characters.
    pub fn check_bounds(&self, len: usize) -> Result<(), EvalError> {
        match self.spans.iter().find(|s| s.start > s.end || s.end > len) {
            Some(s) => Err(EvalError::OutOfBounds {
                note_id: self.note_id.clone(),
                start: s.start,
                end: s.end,
            }),
            None => Ok(()),
        }
    }
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldAnnotation>, EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

/// Sorted, disjoint, non-empty ranges covering the same characters.
fn union(ranges: impl IntoIterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut v: Vec<_> = ranges.into_iter().filter(|(s, e)| e > s).collect();
    v.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(v.len());
    for (s, e) in v {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn covered(ranges: &[(usize, usize)]) -> usize {
    ranges.iter().map(|(s, e)| e - s).sum()
}

/// Overlap size of two sorted disjoint range lists.
fn intersection(a: &[(usize, usize)], b: &[(usize, usize)]) -> usize {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 <= b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Per-note character tallies. Adding tallies is how notes are pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CharCounts {
    /// Predicted characters.
    pub flagged: usize,
    /// Predicted characters gold-labelled templated.
    pub true_positive: usize,
    /// Gold templated characters in spans of at least the minimum length.
    pub eligible: usize,
    /// Eligible characters that were predicted.
    pub eligible_hit: usize,
    /// Predicted characters gold-labelled author or structured.
    pub flagged_author: usize,
    pub flagged_structured: usize,
}

impl CharCounts {
    pub fn precision(&self) -> Option<f64> {
        (self.flagged > 0).then(|| self.true_positive as f64 / self.flagged as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.eligible > 0).then(|| self.eligible_hit as f64 / self.eligible as f64)
    }
}

impl std::ops::Add for CharCounts {
    type Output = CharCounts;

    fn add(self, o: CharCounts) -> CharCounts {
        CharCounts {
            flagged: self.flagged + o.flagged,
            true_positive: self.true_positive + o.true_positive,
            eligible: self.eligible + o.eligible,
            eligible_hit: self.eligible_hit + o.eligible_hit,
            flagged_author: self.flagged_author + o.flagged_author,
            flagged_structured: self.flagged_structured + o.flagged_structured,
        }
    }
}

impl std::iter::Sum for CharCounts {
    fn sum<I: Iterator<Item = CharCounts>>(iter: I) -> Self {
        iter.fold(CharCounts::default(), |a, b| a + b)
    }
}

fn check_predicted(note_id: &str, predicted: &[(usize, usize)]) -> Result<(), EvalError> {
    match predicted.iter().find(|(s, e)| s > e) {
        Some(&(start, end)) => Err(EvalError::OutOfBounds {
            note_id: note_id.to_owned(),
            start,
            end,
        }),
        None => Ok(()),
    }
}

/// Tallies one note. Characters are templated when any templated gold span
/// covers them; a long predicted span may therefore cover several short gold
/// spans and still score.
pub fn char_counts(
    predicted: &[(usize, usize)],
    gold: &GoldAnnotation,
    min_gold_span: usize,
) -> Result<CharCounts, EvalError> {
    check_predicted(&gold.note_id, predicted)?;
    gold.check_bounds(usize::MAX)?;
    let pred = union(predicted.iter().copied());
    let of = |label: GoldLabel| union(gold.spans.iter().filter(|s| s.label == label).map(|s| (s.start, s.end)));
    let templated = of(GoldLabel::Templated);
    let eligible = union(
        gold.spans
            .iter()
            .filter(|s| s.label == GoldLabel::Templated && s.end - s.start >= min_gold_span)
            .map(|s| (s.start, s.end)),
    );
    // Author or structured characters that are not also templated.
    let not_templated = |label| {
        let ranges = of(label);
        intersection(&pred, &ranges) - intersection(&intersection_ranges(&pred, &ranges), &templated)
    };
    Ok(CharCounts {
        flagged: covered(&pred),
        true_positive: intersection(&pred, &templated),
        eligible: covered(&eligible),
        eligible_hit: intersection(&pred, &eligible),
        flagged_author: not_templated(GoldLabel::Author),
        flagged_structured: not_templated(GoldLabel::Structured),
    })
}

fn intersection_ranges(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            out.push((lo, hi));
        }
        if a[i].1 <= b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Fraction of predicted characters that are gold templated; `None` when
/// nothing was predicted.
pub fn char_precision(predicted: &[(usize, usize)], gold: &GoldAnnotation) -> Result<Option<f64>, EvalError> {
    Ok(char_counts(predicted, gold, 0)?.precision())
}

/// Fraction of eligible gold templated characters that were predicted;
/// `None` when no gold span reaches `min_gold_span`.
pub fn char_recall(
    predicted: &[(usize, usize)],
    gold: &GoldAnnotation,
    min_gold_span: usize,
) -> Result<Option<f64>, EvalError> {
    Ok(char_counts(predicted, gold, min_gold_span)?.recall())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub min_gold_span: usize,
    /// Restrict predictions to spans found by this module.
    pub module: Option<Module>,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            min_gold_span: DEFAULT_MIN_GOLD_SPAN,
            module: None,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            confidence: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoteEval {
    pub note_id: String,
    pub counts: CharCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub notes_evaluated: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub precision_ci: Option<(f64, f64)>,
    pub recall_ci: Option<(f64, f64)>,
    pub counts: CharCounts,
    /// Share of predicted characters by gold label.
    pub flagged_templated_fraction: Option<f64>,
    pub flagged_author_fraction: Option<f64>,
    pub flagged_structured_fraction: Option<f64>,
    pub per_note: Vec<NoteEval>,
    /// Gold notes with no prediction record.
    pub missing_predictions: Vec<String>,
    /// Prediction records with no gold annotation.
    pub missing_gold: Vec<String>,
}

/// Scores sidecar predictions against gold annotations over the notes both
/// cover. Predicted spans are those labelled templated (alone or with copied).
pub fn evaluate(
    predictions: &[SidecarRecord],
    gold: &[GoldAnnotation],
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &SidecarRecord> = predictions.iter().map(|p| (p.note_id.as_str(), p)).collect();
    let gold_ids: HashMap<&str, ()> = gold.iter().map(|g| (g.note_id.as_str(), ())).collect();

    let mut per_note = Vec::new();
    let mut missing_predictions = Vec::new();
    for g in gold {
        let Some(record) = by_id.get(g.note_id.as_str()) else {
            missing_predictions.push(g.note_id.clone());
            continue;
        };
        let predicted: Vec<(usize, usize)> = record
            .spans
            .iter()
            .filter(|s| s.label.is_templated())
            .filter(|s| options.module.is_none_or(|m| s.modules.contains(&m)))
            .map(|s| (s.start, s.end))
            .collect();
        let counts = char_counts(&predicted, g, options.min_gold_span)?;
        per_note.push(NoteEval {
            note_id: g.note_id.clone(),
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
        });
    }
    let missing_gold = predictions
        .iter()
        .filter(|p| !gold_ids.contains_key(p.note_id.as_str()))
        .map(|p| p.note_id.clone())
        .collect();

    let counts: CharCounts = per_note.iter().map(|n| n.counts).sum();
    let per_note_counts: Vec<CharCounts> = per_note.iter().map(|n| n.counts).collect();
    let (precision_ci, recall_ci) = bootstrap_ci(&per_note_counts, options);
    let share = |n: usize| (counts.flagged > 0).then(|| n as f64 / counts.flagged as f64);
    Ok(EvalReport {
        notes_evaluated: per_note.len(),
        precision: counts.precision(),
        recall: counts.recall(),
        precision_ci,
        recall_ci,
        counts,
        flagged_templated_fraction: share(counts.true_positive),
        flagged_author_fraction: share(counts.flagged_author),
        flagged_structured_fraction: share(counts.flagged_structured),
        per_note,
        missing_predictions,
        missing_gold,
    })
}

/// Percentile bootstrap over notes for pooled precision and recall.
pub fn bootstrap_ci(notes: &[CharCounts], options: &EvalOptions) -> (Option<(f64, f64)>, Option<(f64, f64)>) {
    if notes.is_empty() || options.bootstrap_resamples == 0 {
        return (None, None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut precisions = Vec::with_capacity(options.bootstrap_resamples);
    let mut recalls = Vec::with_capacity(options.bootstrap_resamples);
    for _ in 0..options.bootstrap_resamples {
        let sample: CharCounts = (0..notes.len()).map(|_| notes[rng.gen_range(0..notes.len())]).sum();
        precisions.extend(sample.precision());
        recalls.extend(sample.recall());
    }
    let alpha = (1.0 - options.confidence) / 2.0;
    (
        percentile_interval(precisions, alpha),
        percentile_interval(recalls, alpha),
    )
}

fn percentile_interval(mut values: Vec<f64>, alpha: f64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (values.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
    };
    Some((at(alpha), at(1.0 - alpha)))
}
