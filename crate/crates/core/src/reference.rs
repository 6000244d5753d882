//! Attribution-guided detection of templated and copied text.
//!
//! Each attributed source (a template body or an earlier note) is aligned
//! against the note with recursive longest-common-substring (gestalt)
//! matching. Matching blocks become candidate spans, which are then merged
//! across whitespace-only gaps and filtered by length.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Note, TemplateSource};
use crate::span::{CopyGroup, FlaggedSpan, Label, Module};

pub const DEFAULT_MIN_SPAN_CHARS: usize = 50;

/// One matched run, in character coordinates of both strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatchBlock {
    pub source_start: usize,
    pub note_start: usize,
    pub length: usize,
}

impl MatchBlock {
    pub fn source_end(&self) -> usize {
        self.source_start + self.length
    }

    pub fn note_end(&self) -> usize {
        self.note_start + self.length
    }
}

/// Gestalt matching over character slices.
///
/// The longest common substring is taken first (earliest source position,
/// then earliest note position, on ties), and the regions to its left and
/// right are matched recursively. Blocks come back ordered and strictly
/// increasing in both coordinates.
pub fn align_chars(source: &[char], note: &[char]) -> Vec<MatchBlock> {
    if source.is_empty() || note.is_empty() {
        return Vec::new();
    }
    let mut finder = LongestMatchFinder::new(note);
    let mut blocks = Vec::new();
    let mut pending = vec![(0, source.len(), 0, note.len())];
    while let Some((alo, ahi, blo, bhi)) = pending.pop() {
        let Some(block) = finder.find(source, alo, ahi, blo, bhi) else {
            continue;
        };
        if alo < block.source_start && blo < block.note_start {
            pending.push((alo, block.source_start, blo, block.note_start));
        }
        if block.source_end() < ahi && block.note_end() < bhi {
            pending.push((block.source_end(), ahi, block.note_end(), bhi));
        }
        blocks.push(block);
    }
    blocks.sort_unstable_by_key(|b| b.source_start);
    blocks
}

pub fn align(source: &str, note: &str) -> Vec<MatchBlock> {
    let source: Vec<char> = source.chars().collect();
    let note: Vec<char> = note.chars().collect();
    align_chars(&source, &note)
}

/// Sparse dynamic program over match positions, reused across windows.
struct LongestMatchFinder {
    /// Ascending positions of each character in the note.
    positions: HashMap<char, Vec<usize>>,
    prev: Vec<u32>,
    cur: Vec<u32>,
    prev_touched: Vec<usize>,
    cur_touched: Vec<usize>,
}

impl LongestMatchFinder {
    fn new(note: &[char]) -> Self {
        let mut positions: HashMap<char, Vec<usize>> = HashMap::new();
        for (j, &c) in note.iter().enumerate() {
            positions.entry(c).or_default().push(j);
        }
        Self {
            positions,
            prev: vec![0; note.len()],
            cur: vec![0; note.len()],
            prev_touched: Vec::new(),
            cur_touched: Vec::new(),
        }
    }

    fn find(&mut self, source: &[char], alo: usize, ahi: usize, blo: usize, bhi: usize) -> Option<MatchBlock> {
        let mut best_len = 0u32;
        let mut best = (alo, blo);
        for (i, c) in source.iter().enumerate().take(ahi).skip(alo) {
            if let Some(hits) = self.positions.get(c) {
                let from = hits.partition_point(|&j| j < blo);
                for &j in hits[from..].iter().take_while(|&&j| j < bhi) {
                    let run = if j > blo { self.prev[j - 1] } else { 0 } + 1;
                    self.cur[j] = run;
                    self.cur_touched.push(j);
                    // Strict comparison keeps the earliest source, then note, start.
                    if run > best_len {
                        best_len = run;
                        best = (i + 1 - run as usize, j + 1 - run as usize);
                    }
                }
            }
            for j in self.prev_touched.drain(..) {
                self.prev[j] = 0;
            }
            std::mem::swap(&mut self.prev, &mut self.cur);
            std::mem::swap(&mut self.prev_touched, &mut self.cur_touched);
        }
        for j in self.prev_touched.drain(..) {
            self.prev[j] = 0;
        }
        (best_len > 0).then_some(MatchBlock {
            source_start: best.0,
            note_start: best.1,
            length: best_len as usize,
        })
    }
}

/// A reference-module detection in note coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CandidateSpan {
    pub note_id: String,
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub source_id: String,
    /// Matched range in the source text.
    pub source_start: usize,
    pub source_end: usize,
}

impl CandidateSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn sort_key(&self) -> (usize, usize, Label, &str, usize, usize) {
        (
            self.start,
            self.end,
            self.label,
            &self.source_id,
            self.source_start,
            self.source_end,
        )
    }

    /// Converts into the module-agnostic form used by the condenser.
    pub fn to_flagged(&self) -> FlaggedSpan {
        let group = (self.label == Label::Copied).then(|| CopyGroup::Source {
            note_id: self.source_id.clone(),
            start: self.source_start,
            end: self.source_end,
        });
        FlaggedSpan {
            start: self.start,
            end: self.end,
            label: self.label,
            module: Module::Reference,
            source_id: Some(self.source_id.clone()),
            group,
        }
    }
}

/// An attributed source to align against a note.
#[derive(Debug, Clone, Copy)]
pub enum AlignSource<'a> {
    Template(&'a TemplateSource),
    Note(&'a Note),
}

impl AlignSource<'_> {
    fn text(&self) -> &str {
        match self {
            AlignSource::Template(t) => &t.text,
            AlignSource::Note(n) => &n.text,
        }
    }

    fn id(&self) -> &str {
        match self {
            AlignSource::Template(t) => &t.template_id,
            AlignSource::Note(n) => &n.note_id,
        }
    }

    fn label(&self) -> Label {
        match self {
            AlignSource::Template(_) => Label::Templated,
            AlignSource::Note(_) => Label::Copied,
        }
    }
}

pub fn extract_spans(note: &Note, source: AlignSource<'_>) -> Vec<CandidateSpan> {
    let note_chars: Vec<char> = note.text.chars().collect();
    extract_spans_chars(note, &note_chars, source)
}

fn extract_spans_chars(note: &Note, note_chars: &[char], source: AlignSource<'_>) -> Vec<CandidateSpan> {
    let source_chars: Vec<char> = source.text().chars().collect();
    align_chars(&source_chars, note_chars)
        .into_iter()
        .map(|b| CandidateSpan {
            note_id: note.note_id.clone(),
            start: b.note_start,
            end: b.note_end(),
            label: source.label(),
            source_id: source.id().to_owned(),
            source_start: b.source_start,
            source_end: b.source_end(),
        })
        .collect()
}

fn is_gap_whitespace(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r')
}

/// Coalesces spans of the same `(label, source_id)` whose gap is only
/// whitespace (an empty gap included). Output is sorted by start.
pub fn merge_whitespace_gaps(spans: &[CandidateSpan], note_text: &str) -> Vec<CandidateSpan> {
    let chars: Vec<char> = note_text.chars().collect();
    merge_whitespace_gaps_chars(spans, &chars)
}

fn merge_whitespace_gaps_chars(spans: &[CandidateSpan], chars: &[char]) -> Vec<CandidateSpan> {
    let mut sorted: Vec<&CandidateSpan> = spans.iter().collect();
    sorted.sort_by(|a, b| {
        (a.label, &a.source_id)
            .cmp(&(b.label, &b.source_id))
            .then_with(|| a.sort_key().cmp(&b.sort_key()))
    });
    let mut merged: Vec<CandidateSpan> = Vec::with_capacity(sorted.len());
    for span in sorted {
        if let Some(last) = merged.last_mut() {
            let same_group = last.label == span.label && last.source_id == span.source_id;
            let bridgeable =
                span.start <= last.end || chars[last.end..span.start].iter().all(|&c| is_gap_whitespace(c));
            if same_group && bridgeable {
                last.end = last.end.max(span.end);
                last.source_start = last.source_start.min(span.source_start);
                last.source_end = last.source_end.max(span.source_end);
                continue;
            }
        }
        merged.push(span.clone());
    }
    merged.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    merged
}

pub fn filter_min_length(spans: Vec<CandidateSpan>, min_chars: usize) -> Vec<CandidateSpan> {
    spans.into_iter().filter(|s| s.len() >= min_chars).collect()
}

/// Where copy sources may be looked up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyScope {
    #[default]
    Corpus,
    Patient,
}

impl std::str::FromStr for CopyScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corpus" => Ok(CopyScope::Corpus),
            "patient" => Ok(CopyScope::Patient),
            other => Err(format!("unknown copy scope {other:?} (corpus|patient)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceConfig {
    pub min_span_chars: usize,
    pub copy_scope: CopyScope,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            min_span_chars: DEFAULT_MIN_SPAN_CHARS,
            copy_scope: CopyScope::Corpus,
        }
    }
}

/// A copy attribution that could not be used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvenanceWarning {
    pub note_id: String,
    pub source_id: String,
    pub reason: WarningReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningReason {
    NotInCorpus,
    OtherPatient,
    SelfReference,
}

impl std::fmt::Display for ProvenanceWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let why = match self.reason {
            WarningReason::NotInCorpus => "not in corpus",
            WarningReason::OtherPatient => "belongs to another patient",
            WarningReason::SelfReference => "refers to the note itself",
        };
        write!(
            f,
            "note {}: copy source {} skipped ({why})",
            self.note_id, self.source_id
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceOutput {
    pub spans: Vec<CandidateSpan>,
    pub warnings: Vec<ProvenanceWarning>,
    /// Number of alignments executed (one per usable source).
    pub alignments: usize,
}

/// Aligns every attributed source of `note`, pools, merges and filters.
pub fn run_reference_module(note: &Note, corpus: &Corpus, config: &ReferenceConfig) -> ReferenceOutput {
    let note_chars: Vec<char> = note.text.chars().collect();
    let mut out = ReferenceOutput::default();
    let mut pooled = Vec::new();

    for template in &note.template_sources {
        pooled.extend(extract_spans_chars(note, &note_chars, AlignSource::Template(template)));
        out.alignments += 1;
    }
    for source_id in &note.copy_source_ids {
        let warn = |reason| ProvenanceWarning {
            note_id: note.note_id.clone(),
            source_id: source_id.clone(),
            reason,
        };
        let source = match corpus.note(source_id) {
            None => {
                out.warnings.push(warn(WarningReason::NotInCorpus));
                continue;
            }
            Some(s) if s.note_id == note.note_id => {
                out.warnings.push(warn(WarningReason::SelfReference));
                continue;
            }
            Some(s) if config.copy_scope == CopyScope::Patient && s.patient_id != note.patient_id => {
                out.warnings.push(warn(WarningReason::OtherPatient));
                continue;
            }
            Some(s) => s,
        };
        pooled.extend(extract_spans_chars(note, &note_chars, AlignSource::Note(source)));
        out.alignments += 1;
    }

    let merged = merge_whitespace_gaps_chars(&pooled, &note_chars);
    out.spans = filter_min_length(merged, config.min_span_chars);
    out
}
