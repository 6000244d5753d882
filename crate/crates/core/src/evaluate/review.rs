use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::EvalError;
use crate::condense::ResolvedSpan;
use crate::corpus::Note;
use crate::span::Module;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewSet {
    Reference,
    Frequency,
    RandomLengthMatched,
}

impl fmt::Display for ReviewSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReviewSet::Reference => "reference",
            ReviewSet::Frequency => "frequency",
            ReviewSet::RandomLengthMatched => "random_length_matched",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReviewRow {
    pub sample_id: String,
    pub note_id: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReviewSample {
    /// Shuffled rows with no hint of their set.
    pub rows: Vec<ReviewRow>,
    /// `(sample_id, set)` answer key.
    pub key: Vec<(String, ReviewSet)>,
}

struct Candidate<'a> {
    note: &'a Note,
    start: usize,
    end: usize,
}

/// Draws `n_per_set` templated spans found by each module and as many random
/// unflagged spans whose lengths follow the detected-span length distribution.
pub fn sample_spans_for_review(
    notes: &[(&Note, &[ResolvedSpan])],
    n_per_set: usize,
    seed: u64,
) -> Result<ReviewSample, EvalError> {
    if n_per_set == 0 {
        return Ok(ReviewSample::default());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let detected = |module: Module| -> Vec<Candidate<'_>> {
        notes
            .iter()
            .flat_map(|(note, spans)| {
                spans
                    .iter()
                    .filter(move |s| s.label.is_templated() && s.modules.contains(&module))
                    .map(move |s| Candidate {
                        note,
                        start: s.start,
                        end: s.end,
                    })
            })
            .collect()
    };

    let mut drawn: Vec<(ReviewSet, Candidate<'_>)> = Vec::with_capacity(3 * n_per_set);
    let mut lengths = Vec::new();
    for (set, module) in [
        (ReviewSet::Reference, Module::Reference),
        (ReviewSet::Frequency, Module::Frequency),
    ] {
        let pool = detected(module);
        if pool.len() < n_per_set {
            return Err(EvalError::InsufficientSpans {
                set,
                needed: n_per_set,
                available: pool.len(),
            });
        }
        lengths.extend(pool.iter().map(|c| c.end - c.start));
        let picks = rand::seq::index::sample(&mut rng, pool.len(), n_per_set);
        let mut pool: Vec<Option<Candidate<'_>>> = pool.into_iter().map(Some).collect();
        for i in picks {
            drawn.push((set, pool[i].take().expect("indices are distinct")));
        }
    }

    // Unflagged gaps as (note index, start, end).
    let gaps: Vec<(usize, usize, usize)> = notes
        .iter()
        .enumerate()
        .flat_map(|(i, (note, spans))| {
            let mut cuts: Vec<(usize, usize)> = spans.iter().map(|s| (s.start, s.end)).collect();
            cuts.sort_unstable();
            let mut out = Vec::new();
            let mut cursor = 0;
            for (s, e) in cuts
                .into_iter()
                .chain(std::iter::once((note.char_len(), note.char_len())))
            {
                if s > cursor {
                    out.push((i, cursor, s));
                }
                cursor = cursor.max(e);
            }
            out
        })
        .collect();
    let mut random = 0;
    let mut attempts = 0;
    while random < n_per_set {
        attempts += 1;
        if attempts > 100 * n_per_set {
            return Err(EvalError::InsufficientSpans {
                set: ReviewSet::RandomLengthMatched,
                needed: n_per_set,
                available: random,
            });
        }
        let len = lengths[rng.gen_range(0..lengths.len())];
        let placements: usize = gaps.iter().map(|&(_, s, e)| (e - s + 1).saturating_sub(len)).sum();
        if placements == 0 {
            continue;
        }
        let mut pick = rng.gen_range(0..placements);
        for &(i, s, e) in &gaps {
            let here = (e - s + 1).saturating_sub(len);
            if pick < here {
                drawn.push((
                    ReviewSet::RandomLengthMatched,
                    Candidate {
                        note: notes[i].0,
                        start: s + pick,
                        end: s + pick + len,
                    },
                ));
                break;
            }
            pick -= here;
        }
        random += 1;
    }

    drawn.shuffle(&mut rng);
    let width = (drawn.len()).to_string().len().max(4);
    let mut sample = ReviewSample::default();
    for (i, (set, c)) in drawn.into_iter().enumerate() {
        let sample_id = format!("S{:0width$}", i + 1);
        sample.rows.push(ReviewRow {
            sample_id: sample_id.clone(),
            note_id: c.note.note_id.clone(),
            start: c.start,
            end: c.end,
            text: c.note.text.chars().skip(c.start).take(c.end - c.start).collect(),
        });
        sample.key.push((sample_id, set));
    }
    Ok(sample)
}

pub fn write_review(sample: &ReviewSample, rows_path: &Path, key_path: &Path) -> Result<(), EvalError> {
    let csv_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Csv {
            path: path.clone(),
            source,
        }
    };
    let mut rows = csv::Writer::from_path(rows_path).map_err(csv_err(rows_path))?;
    rows.write_record(["sample_id", "note_id", "start", "end", "text"])
        .map_err(csv_err(rows_path))?;
    for r in &sample.rows {
        rows.write_record([
            r.sample_id.as_str(),
            r.note_id.as_str(),
            &r.start.to_string(),
            &r.end.to_string(),
            r.text.as_str(),
        ])
        .map_err(csv_err(rows_path))?;
    }
    rows.flush().map_err(|source| EvalError::Io {
        path: rows_path.display().to_string(),
        source,
    })?;

    let mut key = csv::Writer::from_path(key_path).map_err(csv_err(key_path))?;
    key.write_record(["sample_id", "set"]).map_err(csv_err(key_path))?;
    for (id, set) in &sample.key {
        key.write_record([id.as_str(), &set.to_string()])
            .map_err(csv_err(key_path))?;
    }
    key.flush().map_err(|source| EvalError::Io {
        path: key_path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::{Action, Label};
    use chrono::{TimeZone, Utc};

    fn note(i: usize) -> Note {
        Note {
            note_id: format!("n{i:03}"),
            patient_id: "p".into(),
            filed_at: Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap(),
            note_type: "Progress Notes".into(),
            text: "abcdefghij".repeat(40),
            template_sources: vec![],
            copy_source_ids: vec![],
        }
    }

    fn span(start: usize, end: usize, modules: Vec<Module>) -> ResolvedSpan {
        ResolvedSpan {
            note_id: String::new(),
            start,
            end,
            label: Label::Templated,
            modules,
            source_ids: vec![],
            action: Action::Remove,
            members: vec![],
        }
    }

    fn corpus() -> (Vec<Note>, Vec<Vec<ResolvedSpan>>) {
        let notes: Vec<Note> = (0..20).map(note).collect();
        let spans = (0..20)
            .map(|i| {
                vec![
                    span(0, 60 + i, vec![Module::Reference]),
                    span(200, 280, vec![Module::Frequency]),
                ]
            })
            .collect();
        (notes, spans)
    }

    #[test]
    fn blinded_and_reproducible() {
        let (notes, spans) = corpus();
        let input: Vec<(&Note, &[ResolvedSpan])> = notes.iter().zip(&spans).map(|(n, s)| (n, s.as_slice())).collect();
        let a = sample_spans_for_review(&input, 10, 3).unwrap();
        assert_eq!(a, sample_spans_for_review(&input, 10, 3).unwrap());
        assert_eq!(a.rows.len(), 30);
        for set in [
            ReviewSet::Reference,
            ReviewSet::Frequency,
            ReviewSet::RandomLengthMatched,
        ] {
            assert_eq!(a.key.iter().filter(|(_, s)| *s == set).count(), 10);
        }
        let sets: std::collections::HashMap<&str, ReviewSet> = a.key.iter().map(|(id, s)| (id.as_str(), *s)).collect();
        for row in &a.rows {
            assert_eq!(row.text.chars().count(), row.end - row.start);
            if sets[row.sample_id.as_str()] == ReviewSet::RandomLengthMatched {
                let s = &spans[notes.iter().position(|n| n.note_id == row.note_id).unwrap()];
                assert!(s.iter().all(|f| row.end <= f.start || row.start >= f.end));
            }
        }
    }

    #[test]
    fn zero_and_too_many() {
        let (notes, spans) = corpus();
        let input: Vec<(&Note, &[ResolvedSpan])> = notes.iter().zip(&spans).map(|(n, s)| (n, s.as_slice())).collect();
        assert!(sample_spans_for_review(&input, 0, 1).unwrap().rows.is_empty());
        assert!(matches!(
            sample_spans_for_review(&input, 21, 1),
            Err(EvalError::InsufficientSpans { .. })
        ));
    }

    #[test]
    fn csv_outputs() {
        let (notes, spans) = corpus();
        let input: Vec<(&Note, &[ResolvedSpan])> = notes.iter().zip(&spans).map(|(n, s)| (n, s.as_slice())).collect();
        let sample = sample_spans_for_review(&input, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (rows, key) = (dir.path().join("rows.csv"), dir.path().join("key.csv"));
        write_review(&sample, &rows, &key).unwrap();
        let rows = std::fs::read_to_string(rows).unwrap();
        assert!(rows.starts_with("sample_id,note_id,start,end,text\n"));
        assert!(!rows.contains("reference"));
        let key = std::fs::read_to_string(key).unwrap();
        assert_eq!(key.lines().count(), 7);
    }
}
